//! `cadiff` command-line driver.

mod config;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use cadiff::arplan::{generate_ar_steps, step_count_pmf, ArPlan};
use cadiff::causal_mask::{build_mask, verify_mask, MaskVariant};
use cadiff::datagen::{gen_dataset, Dataset};
use cadiff::denoiser::DenoiserConfig;
use cadiff::diffusion::{
    grad_check_denoiser, train, Checkpoint, ConditionSequence, GRAD_CHECK_TOL,
};
use cadiff::metrics::{evaluate, mode_shares, token_rms, EvalInputs};
use cadiff::numerics::Matrix;
use cadiff::rng::derived_rng;
use cadiff::sampler::{sample_many, SampleRecord, SampleSet};
use cadiff::{Error, Result};
use clap::{Args, Parser, Subcommand};
use config::RunConfig;
use serde_json::json;

#[derive(Parser)]
#[command(name = "cadiff", version, about = "Causal-attention diffusion over latent token sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML run configuration with [data], [model], [train], [sample] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output JSON-lines file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a denoiser on a dataset.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Loss log CSV; defaults to the checkpoint path with `.loss.csv`.
        #[arg(long)]
        loss_log: Option<PathBuf>,
    },
    /// Generate samples from a checkpoint.
    Sample {
        /// Settings start from the checkpoint's run configuration.
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset supplying conditions, cycling through the modes.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Use the null condition. Defaults `sample.steps` to 25, capped at the
        /// timestep count, unless set.
        #[arg(long)]
        unconditional: bool,
        /// Number of samples; overrides `sample.n`.
        #[arg(long)]
        n: Option<usize>,
        /// Output JSON-lines file. Timing goes to `<out>.meta.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a samples file against a dataset.
    Eval {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report JSON; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print an attention mask as ASCII (`.` attend, `#` blocked) and CSV.
    MaskDump {
        #[arg(long)]
        l: usize,
        #[arg(long, default_value_t = 1)]
        cl: usize,
        /// Step-count decay used to draw the plan when `--sizes` is absent.
        #[arg(long, default_value_t = 0.5)]
        gamma: f64,
        /// Explicit block sizes, e.g. `2,2,3`.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long, default_value = "partial")]
        variant: MaskVariant,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Draw plans and report them with the step-count histogram.
    PlanDump {
        #[arg(long)]
        l: usize,
        #[arg(long, default_value_t = 0.5)]
        gamma: f64,
        /// Number of draws.
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare analytic and finite-difference gradients of the training loss.
    GradCheck {
        #[arg(long, default_value_t = 8)]
        d_model: usize,
        #[arg(long, default_value_t = 2)]
        n_blocks: usize,
        #[arg(long, default_value_t = 2)]
        n_heads: usize,
        #[arg(long, default_value_t = 16)]
        d_ff: usize,
        #[arg(long, default_value_t = 4)]
        d_token: usize,
        #[arg(long, default_value_t = 4)]
        l: usize,
        #[arg(long, default_value_t = 2)]
        cl: usize,
        #[arg(long, default_value_t = 100)]
        timesteps: usize,
        #[arg(long, default_value = "partial")]
        variant: MaskVariant,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the noise schedule as CSV.
    ScheduleDump {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

/// Failure to report: an engine error, or a check that ran but did not pass.
enum Failure {
    Engine(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Engine(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Engine(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Engine(e.into())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        return report(Failure::Engine(e));
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f),
    }
}

fn report(f: Failure) -> ExitCode {
    let (kind, message, code) = match f {
        Failure::Engine(e) => {
            let code = if matches!(e, Error::Config(_)) { 2 } else { 1 };
            (e.kind(), e.to_string(), code)
        }
        Failure::Check(m) => ("check", m, 1),
    };
    eprintln!("{}", json!({"error": kind, "message": message}));
    ExitCode::from(code)
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("CADIFF_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("CADIFF_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::GenData { cfg, out } => gen_data(&cfg, &out),
        Command::Train {
            cfg,
            data,
            out,
            loss_log,
        } => {
            let log = loss_log.unwrap_or_else(|| with_suffix(&out, ".loss.csv"));
            train_cmd(&cfg, &data, &out, &log)
        }
        Command::Sample {
            cfg,
            checkpoint,
            data,
            unconditional,
            n,
            out,
        } => sample_cmd(&cfg, &checkpoint, data.as_deref(), unconditional, n, &out),
        Command::Eval { samples, data, out } => eval_cmd(&samples, &data, out.as_deref()),
        Command::MaskDump {
            l,
            cl,
            gamma,
            sizes,
            variant,
            seed,
        } => mask_dump(l, cl, gamma, sizes, variant, seed),
        Command::PlanDump { l, gamma, n, seed } => plan_dump(l, gamma, n, seed),
        Command::GradCheck {
            d_model,
            n_blocks,
            n_heads,
            d_ff,
            d_token,
            l,
            cl,
            timesteps,
            variant,
            seed,
        } => {
            let model = DenoiserConfig {
                d_model,
                n_blocks,
                n_heads,
                d_ff,
                d_token,
                l,
                cl,
                timesteps,
                data_std: 1.0,
            };
            grad_check_cmd(&model, variant, seed)
        }
        Command::ScheduleDump { cfg } => {
            let run = config::load(None, cfg.config.as_deref(), &cfg.sets)?;
            print!("{}", run.train.schedule_config().build()?.to_csv());
            Ok(())
        }
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn gen_data(cfg: &ConfigArgs, out: &Path) -> Result<(), Failure> {
    let run = config::load(None, cfg.config.as_deref(), &cfg.sets)?;
    let ds = gen_dataset(&run.data)?;
    ds.save(out)?;
    log::info!("wrote {} records to {}", ds.records.len(), out.display());
    Ok(())
}

fn train_cmd(cfg: &ConfigArgs, data: &Path, out: &Path, log_path: &Path) -> Result<(), Failure> {
    let run = config::load(None, cfg.config.as_deref(), &cfg.sets)?;
    let ds = Dataset::load(data)?;
    let data_std = match run.model.data_std {
        Some(s) => s,
        None => {
            let x0: Vec<Matrix<f64>> = ds.records.iter().map(|r| r.x0.clone()).collect();
            token_rms(&x0)?
        }
    };
    let model = run.denoiser(&ds.config, data_std);
    model.validate()?;

    let start = Instant::now();
    let outcome = train(&ds.records, &run.train, &model, run.seed)?;
    let mut ckpt = outcome.checkpoint;
    ckpt.header.run_config = Some(run.to_json());
    ckpt.save(out)?;

    let mut csv = String::from("step,epoch,loss\n");
    for r in &outcome.losses {
        csv.push_str(&format!("{},{},{}\n", r.step, r.epoch, r.loss));
    }
    std::fs::write(log_path, csv)?;
    write_json(
        &with_suffix(out, ".meta.json"),
        &json!({"elapsed_secs": start.elapsed().as_secs_f64(), "steps": outcome.losses.len()}),
    )?;
    log::info!("trained {} steps in {:.1?}", outcome.losses.len(), start.elapsed());
    Ok(())
}

fn sample_cmd(
    cfg: &ConfigArgs,
    ckpt_path: &Path,
    data: Option<&Path>,
    unconditional: bool,
    n: Option<usize>,
    out: &Path,
) -> Result<(), Failure> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let base: Option<RunConfig> = match &ckpt.header.run_config {
        Some(v) => Some(
            serde_json::from_value(v.clone())
                .map_err(|e| Error::Format(format!("checkpoint run configuration: {e}")))?,
        ),
        None => None,
    };
    let mut sets = cfg.sets.clone();
    if unconditional && !config::is_set(cfg.config.as_deref(), &cfg.sets, "sample.steps")? {
        let steps = ckpt.header.train.timesteps.min(25);
        sets.insert(0, format!("sample.steps={steps}"));
    }
    if let Some(n) = n {
        sets.push(format!("sample.n={n}"));
    }
    let mut run = config::load(base.as_ref(), cfg.config.as_deref(), &sets)?;
    if run.train.timesteps != ckpt.header.train.timesteps {
        return Err(Error::Config(format!(
            "train.timesteps ({}) differs from the checkpoint ({})",
            run.train.timesteps, ckpt.header.train.timesteps
        ))
        .into());
    }
    // The schedule is part of the trained model.
    run.train = ckpt.header.train;
    let schedule = ckpt.header.train.schedule_config().build()?;
    let model = &ckpt.params;
    let (cl, d) = (model.config.cl, model.config.d_token);
    let count = run.sample.n;

    let (conds, modes, refs): (Vec<ConditionSequence<f32>>, Vec<Option<usize>>, Vec<Option<Matrix<f64>>>) =
        if unconditional {
            (
                vec![ConditionSequence::null(cl, d); count],
                vec![None; count],
                vec![None; count],
            )
        } else {
            let path = data.ok_or_else(|| {
                Error::Config("conditional sampling needs --data (or pass --unconditional)".into())
            })?;
            let ds = Dataset::load(path)?;
            let idx = ds.round_robin(count)?;
            let mut c = Vec::with_capacity(count);
            let mut m = Vec::with_capacity(count);
            let mut r = Vec::with_capacity(count);
            for i in idx {
                let rec = &ds.records[i];
                if rec.cond.shape() != (cl, d) {
                    return Err(Error::Config(format!(
                        "dataset conditions are {:?}, checkpoint expects {cl}x{d}",
                        rec.cond.shape()
                    ))
                    .into());
                }
                c.push(ConditionSequence::new(rec.cond.cast()));
                m.push(Some(rec.mode));
                r.push(Some(rec.x0.clone()));
            }
            (c, m, r)
        };

    let start = Instant::now();
    let generated = sample_many(model, &schedule, &conds, &run.sample.sampler())?;
    let records = generated
        .iter()
        .zip(modes)
        .zip(&refs)
        .map(|((g, m), r)| SampleRecord::from_generated(g, m, r.as_ref()))
        .collect();
    let mut echo = run.to_json();
    echo["unconditional"] = json!(unconditional);
    let set = SampleSet {
        config: echo,
        records,
    };
    set.save(out)?;
    write_json(
        &with_suffix(out, ".meta.json"),
        &json!({"elapsed_secs": start.elapsed().as_secs_f64(), "samples": count}),
    )?;
    log::info!("wrote {count} samples in {:.1?}", start.elapsed());
    Ok(())
}

fn eval_cmd(samples: &Path, data: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let set = SampleSet::load(samples)?;
    let ds = Dataset::load(data)?;
    let gen = set.tokens()?;
    let refs: Option<Vec<Matrix<f64>>> = set
        .records
        .iter()
        .map(|r| r.reference.as_ref().map(|m| Matrix::from_rows(m)))
        .collect::<Option<Result<_>>>()
        .transpose()?;
    let targets: Option<Vec<usize>> = set.records.iter().map(|r| r.cond_mode).collect();
    let train: Vec<Matrix<f64>> = ds.records.iter().map(|r| r.x0.clone()).collect();
    let report = evaluate(&EvalInputs {
        gen: &gen,
        refs: refs.as_deref(),
        train: &train,
        centers: Some(&ds.centers),
        targets: targets.as_deref(),
    })?
    .with_overall();
    let shares = mode_shares(&gen, &ds.centers)?;
    let mut value = serde_json::to_value(&report)?;
    value["n"] = json!(gen.len());
    value["mode_shares"] = json!(shares);
    value["config"] = json!({"samples": set.config, "data": ds.config});
    match out {
        Some(p) => write_json(p, &value)?,
        None => println!("{}", serde_json::to_string_pretty(&value)?),
    }
    Ok(())
}

fn mask_dump(
    l: usize,
    cl: usize,
    gamma: f64,
    sizes: Option<Vec<usize>>,
    variant: MaskVariant,
    seed: u64,
) -> Result<(), Failure> {
    let plan = match sizes {
        Some(s) => {
            let plan = ArPlan::from_sizes(s)?;
            if plan.len() != l {
                return Err(Error::Config(format!(
                    "sizes sum to {}, but l is {l}",
                    plan.len()
                ))
                .into());
            }
            plan
        }
        None => generate_ar_steps(l, gamma, &mut derived_rng(seed, "plan"))?,
    };
    let mask = build_mask(&plan, cl, variant)?;
    let check = verify_mask(&mask, &plan, cl, variant);
    if !check.is_clean() {
        return Err(Failure::Check(format!("mask fails verification: {check:?}")));
    }
    let mut stdout = std::io::stdout().lock();
    writeln!(
        stdout,
        "# sizes={:?} cl={cl} v={} l={} variant={variant}",
        plan.sizes(),
        mask.v(),
        mask.l()
    )?;
    write!(stdout, "{}", mask.to_ascii())?;
    writeln!(stdout)?;
    write!(stdout, "{}", mask.to_csv())?;
    Ok(())
}

fn plan_dump(l: usize, gamma: f64, n: usize, seed: u64) -> Result<(), Failure> {
    let pmf = step_count_pmf(l, gamma)?;
    let mut rng = derived_rng(seed, "plan");
    let mut plans = Vec::with_capacity(n);
    let mut hist: BTreeMap<usize, usize> = (1..=l).map(|s| (s, 0)).collect();
    for _ in 0..n {
        let p = generate_ar_steps(l, gamma, &mut rng)?;
        *hist.entry(p.steps()).or_default() += 1;
        plans.push(p.to_json());
    }
    let value = json!({
        "l": l,
        "gamma": gamma,
        "seed": seed,
        "plans": plans,
        "step_counts": hist,
        "expected_pmf": pmf,
    });
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(())
}

fn grad_check_cmd(model: &DenoiserConfig, variant: MaskVariant, seed: u64) -> Result<(), Failure> {
    let r = grad_check_denoiser(model, variant, seed)?;
    let pass = r.max_rel_err < GRAD_CHECK_TOL;
    println!(
        "{}",
        json!({
            "max_rel_err": r.max_rel_err,
            "tolerance": GRAD_CHECK_TOL,
            "checked": r.checked,
            "pass": pass,
        })
    );
    if pass {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "max relative error {:e} exceeds {GRAD_CHECK_TOL:e}",
            r.max_rel_err
        )))
    }
}
