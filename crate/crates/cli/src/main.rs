use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use fdfo::checkpoint::Checkpoint;
use fdfo::config::{ExperimentConfig, VerifyConfig};
use fdfo::data::{loss_csv, pretrain};
use fdfo::eval::evaluate;
use fdfo::numerics::Mat;
use fdfo::plot::{line_plot_svg, read_series};
use fdfo::posttrain::{train, Method, OutputSpec, TrainContext};
use fdfo::rng::{self, Domain};
use fdfo::sampler::{euler_sample, schedule_uniform, Mixer, TimeGrid};
use fdfo::velocity::{ConditionId, GuidedNet, VelocityNet};
use fdfo::verification::{
    gradcheck, jacobian_psd_stat, marginal_check, prototype_fdfo_step, prototype_oracle, sampler_degeneracy,
    stein_check, LinearFlowOracle, NetFlow, OracleReward,
};

const EVAL_SALT: u64 = 0x6576_616c_7365_6564;

#[derive(Parser)]
#[command(name = "fdfo", version, about = "Reward post-training for conditional flow-matching models")]
struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrains a velocity network on the configured dataset.
    Pretrain {
        /// Output directory (default: the configured one).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Post-trains a checkpoint against the configured reward.
    Posttrain {
        #[arg(long)]
        init: PathBuf,
        /// Run the group-relative baseline instead.
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluates a checkpoint on fresh noise.
    Eval {
        checkpoint: PathBuf,
        /// Write the evaluation CSV here instead of stdout.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Runs a numerical check and prints a JSON report.
    Verify {
        check: Check,
        /// Sample or case count, e.g. 1e6.
        #[arg(long, value_parser = parse_count)]
        n: Option<usize>,
        /// Negative control for the marginal check.
        #[arg(long)]
        break_mixer: bool,
        /// Network for the prototype and jacobian surveys.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plots metrics CSV files as an SVG line chart.
    Plot {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long, default_value = "mean_reward")]
        column: Vec<String>,
        #[arg(long, default_value = "epoch")]
        x: String,
        /// SVG path (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Check {
    Stein,
    Marginal,
    Gradcheck,
    SamplerDegeneracy,
    Prototype,
    Jacobian,
}

fn parse_count(s: &str) -> std::result::Result<usize, String> {
    let v: f64 = s.parse().map_err(|_| format!("not a number: {s}"))?;
    if v >= 1.0 && v.fract() == 0.0 && v <= 1e12 {
        Ok(v as usize)
    } else {
        Err(format!("expected a positive integer count, got {s}"))
    }
}

/// A failed check, as opposed to an error running it.
#[derive(Debug)]
struct CheckFailed;

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("check failed")
    }
}

impl std::error::Error for CheckFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<CheckFailed>().is_some() {
        return 1;
    }
    match err.downcast_ref::<fdfo::Error>() {
        Some(fdfo::Error::Divergence(_) | fdfo::Error::NonFinite(_)) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if e.downcast_ref::<CheckFailed>().is_none() {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("FDFO_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| anyhow!("FDFO_THREADS must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { out } => {
            let cfg = load_config(cli.config.as_deref(), cli.seed)?;
            cmd_pretrain(&cfg, out)
        }
        Command::Posttrain {
            init,
            baseline,
            epochs,
            out,
        } => {
            let mut cfg = load_config(cli.config.as_deref(), cli.seed)?;
            if let Some(e) = epochs {
                cfg.posttrain.epochs = e;
            }
            cmd_posttrain(&cfg, &init, baseline, out)
        }
        Command::Eval { checkpoint, metrics } => {
            let cfg = load_config(cli.config.as_deref(), cli.seed)?;
            cmd_eval(&cfg, &checkpoint, metrics.as_deref())
        }
        Command::Verify {
            check,
            n,
            break_mixer,
            init,
            out,
        } => {
            let (verify, cfg, seed) = match cli.config.as_deref() {
                Some(path) => {
                    let cfg = load_config(Some(path), cli.seed)?;
                    (cfg.verify.clone(), Some(cfg.clone()), cfg.seed)
                }
                None => (VerifyConfig::default(), None, cli.seed.unwrap_or(0)),
            };
            let opts = VerifyOptions {
                verify,
                config: cfg,
                seed,
                n,
                break_mixer,
                init,
            };
            cmd_verify(check, &opts, out.as_deref())
        }
        Command::Plot { csv, column, x, out } => cmd_plot(&csv, &column, &x, out.as_deref()),
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let path = path.ok_or_else(|| fdfo::Error::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| fdfo::Error::io(dir, e))?;
    Ok(())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| fdfo::Error::io(path, e))?;
    Ok(())
}

fn dataset_meta(cfg: &ExperimentConfig) -> Result<String> {
    Ok(serde_json::to_string(&cfg.dataset)?)
}

fn cmd_pretrain(cfg: &ExperimentConfig, out: Option<PathBuf>) -> Result<()> {
    let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
    create_dir(&dir)?;
    let outcome = pretrain(&cfg.dataset, &cfg.model.hidden, &cfg.pretrain, cfg.seed)?;
    let ck = Checkpoint {
        net: outcome.net,
        optimizer: Some(outcome.optimizer),
        config_hash: cfg.hash(),
        epoch: 0,
        meta: dataset_meta(cfg)?,
    };
    ck.save(&dir.join("pre.ckpt"))?;
    write_file(&dir.join("pretrain_loss.csv"), loss_csv(&outcome.losses))?;
    if let Some((step, loss)) = outcome.losses.last() {
        eprintln!("pretrained {} steps, final loss {loss:.5}", step);
    }
    eprintln!("wrote {}", dir.join("pre.ckpt").display());
    Ok(())
}

fn load_matching(cfg: &ExperimentConfig, path: &Path) -> Result<VelocityNet> {
    let ck = Checkpoint::load(path)?;
    let want = cfg.arch()?;
    if ck.net.arch() != &want {
        bail!(fdfo::Error::Config(format!(
            "{}: checkpoint architecture {:?} does not match the configured {:?}",
            path.display(),
            ck.net.arch(),
            want
        )));
    }
    Ok(ck.net)
}

fn cmd_posttrain(cfg: &ExperimentConfig, init: &Path, baseline: bool, out: Option<PathBuf>) -> Result<()> {
    let net = load_matching(cfg, init)?;
    let reward = cfg.reward()?;
    let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
    create_dir(&dir)?;
    let ctx = TrainContext {
        config: &cfg.posttrain,
        reward,
        base: &net,
        seed: cfg.seed,
    };
    let spec = OutputSpec {
        dir: dir.clone(),
        config_hash: cfg.hash(),
        meta: dataset_meta(cfg)?,
    };
    let method = if baseline { Method::Baseline } else { Method::Fdfo };
    let outcome = train(&net, &ctx, method, Some(&spec), &|m| {
        eprintln!(
            "epoch {:>4}  reward {:>9.4}  eval {:>9.4}  clip {:.3}",
            m.epoch, m.mean_reward, m.eval_reward, m.clip_fraction
        );
        false
    })?;
    eprintln!("{} epochs, metrics in {}", outcome.metrics.len(), dir.join("metrics.csv").display());
    Ok(())
}

fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, metrics: Option<&Path>) -> Result<()> {
    let net = load_matching(cfg, checkpoint)?;
    let reward = cfg.reward()?;
    let centers = cfg.dataset.mode_centers();
    let modes = match (&centers, cfg.dataset.mode_std()) {
        (Some(c), Some(s)) => Some((c.as_slice(), s)),
        _ => None,
    };
    let report = evaluate(
        &net,
        cfg.posttrain.cfg_scale,
        reward,
        modes,
        &cfg.posttrain.eval,
        cfg.seed ^ EVAL_SALT,
    )?;
    let csv = report.to_csv();
    match metrics {
        Some(path) => write_file(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

struct VerifyOptions {
    verify: VerifyConfig,
    config: Option<ExperimentConfig>,
    seed: u64,
    n: Option<usize>,
    break_mixer: bool,
    init: Option<PathBuf>,
}

impl VerifyOptions {
    fn net(&self) -> Result<Option<(VelocityNet, &ExperimentConfig)>> {
        let Some(path) = &self.init else {
            return Ok(None);
        };
        let cfg = self
            .config
            .as_ref()
            .ok_or_else(|| fdfo::Error::Config("--init needs --config".into()))?;
        Ok(Some((load_matching(cfg, path)?, cfg)))
    }
}

fn spd_oracle() -> Result<LinearFlowOracle> {
    Ok(LinearFlowOracle {
        a: Mat::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]])?,
        reward: OracleReward::Linear(vec![1.0, -0.5]),
        sigma_c: 0.1,
    })
}

fn cmd_verify(check: Check, opts: &VerifyOptions, out: Option<&Path>) -> Result<()> {
    let v = &opts.verify;
    let seed = opts.seed;
    let (passed, details): (bool, Value) = match check {
        Check::Stein => {
            let n = opts.n.unwrap_or(v.stein_samples);
            let rep = stein_check(&LinearFlowOracle::reference(), n, seed)?;
            (rep.relative_error < 0.02, json!({ "tolerance": 0.02, "report": rep }))
        }
        Check::Marginal => {
            let n = opts.n.unwrap_or(v.marginal_samples);
            let grid = TimeGrid::uniform(v.marginal_steps)?;
            let mixer = if opts.break_mixer { Mixer::DoubledNoise } else { Mixer::Exact };
            let mut runs = Vec::new();
            let mut ok = true;
            for &gamma in &v.marginal_gammas {
                let sched = schedule_uniform(v.marginal_steps, gamma)?;
                let rep = marginal_check(v.sigma_d, &sched, &grid, n, mixer, seed)?;
                ok &= rep.max_z_discrete < 4.0;
                runs.push(json!({ "gamma": gamma, "report": rep }));
            }
            (ok, json!({ "mixer": format!("{mixer:?}"), "z_limit": 4.0, "runs": runs }))
        }
        Check::Gradcheck => {
            let n = opts.n.unwrap_or(v.gradcheck_cases);
            let err = gradcheck(n, seed)?;
            (err < 1e-4, json!({ "cases": n, "max_relative_error": err, "tolerance": 1e-4 }))
        }
        Check::SamplerDegeneracy => {
            let n = opts.n.unwrap_or(v.degeneracy_cases);
            let mismatches = sampler_degeneracy(n, seed)?;
            (mismatches == 0, json!({ "cases": n, "mismatches": mismatches }))
        }
        Check::Prototype => {
            let n = opts.n.unwrap_or(v.prototype_samples);
            let oracle = spd_oracle()?;
            let lin = prototype_oracle(&oracle, &[0.0, 0.0], n.max(2), seed)?;
            let mut ok = lin.z() >= 5.0;
            let mut details = json!({ "linear": { "z": lin.z(), "report": lin, "z_min": 5.0 } });
            if let Some((net, cfg)) = opts.net()? {
                let steps = cfg.posttrain.steps;
                let rep = prototype_fdfo_step(
                    &net,
                    cfg.posttrain.cfg_scale,
                    cfg.reward()?,
                    steps,
                    steps / 2,
                    v.prototype_sigma,
                    n.max(2),
                    seed,
                )?;
                ok &= rep.z() >= 3.0;
                details["net"] = json!({ "j": steps / 2, "z": rep.z(), "report": rep, "z_min": 3.0 });
            }
            (ok, details)
        }
        Check::Jacobian => {
            let oracle = spd_oracle()?;
            let want = 1.5 - 0.5f64.sqrt();
            let got = jacobian_psd_stat(&oracle, &[0.3, 0.3], v.jacobian_step)?;
            let ok = (got - want).abs() < 1e-3;
            let mut details = json!({ "linear": { "min_eigenvalue": got, "analytic": want, "tolerance": 1e-3 } });
            if let Some((net, cfg)) = opts.net()? {
                details["net"] = jacobian_survey(&net, cfg, opts.n.unwrap_or(v.jacobian_points), v.jacobian_step, seed)?;
            }
            (ok, details)
        }
    };
    let report = json!({ "check": check, "passed": passed, "seed": seed, "details": details });
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(path) = out {
        write_file(path, format!("{text}\n"))?;
    }
    if passed {
        Ok(())
    } else {
        Err(CheckFailed.into())
    }
}

/// Minimum symmetric-part eigenvalues of the completion map at states
/// visited by Euler trajectories; informational only.
fn jacobian_survey(net: &VelocityNet, cfg: &ExperimentConfig, points: usize, h: f64, seed: u64) -> Result<Value> {
    let steps = cfg.posttrain.steps;
    let grid = TimeGrid::uniform(steps)?;
    let field = GuidedNet::new(net, cfg.posttrain.cfg_scale);
    let arch = net.arch();
    let mut stats = Vec::with_capacity(points);
    for k in 0..points as u64 {
        let mut r = rng::stream(seed, Domain::Verify, 3 << 32, k);
        let c = ConditionId(rng::index(&mut r, arch.n_conditions));
        let start = rng::index(&mut r, steps);
        let eps = rng::normal_vec(&mut r, arch.dim);
        let traj = euler_sample(&field, &eps, c, &grid)?;
        let flow = NetFlow {
            field,
            grid: &grid,
            start,
            condition: c,
        };
        stats.push(jacobian_psd_stat(&flow, traj.state(start), h)?);
    }
    let positive = stats.iter().filter(|s| **s > 0.0).count();
    Ok(json!({
        "points": points,
        "positive_fraction": if points == 0 { 0.0 } else { positive as f64 / points as f64 },
        "min": stats.iter().copied().fold(f64::INFINITY, f64::min),
        "statistics": stats,
    }))
}

fn cmd_plot(paths: &[PathBuf], columns: &[String], x: &str, out: Option<&Path>) -> Result<()> {
    let mut series = Vec::new();
    for path in paths {
        let text = std::fs::read_to_string(path).map_err(|e| fdfo::Error::io(path, e))?;
        let prefix = if paths.len() > 1 {
            let stem = path
                .parent()
                .and_then(|p| p.file_name())
                .or_else(|| path.file_stem())
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            format!("{stem}: ")
        } else {
            String::new()
        };
        series.extend(read_series(&text, x, columns, &prefix).with_context(|| path.display().to_string())?);
    }
    let svg = line_plot_svg(&series, &columns.join(", "), x, &columns.join(", "));
    match out {
        Some(path) => write_file(path, svg)?,
        None => print!("{svg}"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&CheckFailed.into()), 1);
        assert_eq!(exit_code(&fdfo::Error::Config("x".into()).into()), 2);
        assert_eq!(exit_code(&anyhow::Error::from(fdfo::Error::Divergence("loss".into())).context("epoch 3")), 3);
        assert_eq!(exit_code(&fdfo::Error::NonFinite("loss".into()).into()), 3);
    }

    #[test]
    fn counts() {
        assert_eq!(parse_count("1e6"), Ok(1_000_000));
        assert_eq!(parse_count("250"), Ok(250));
        assert!(parse_count("0").is_err() && parse_count("1.5").is_err() && parse_count("x").is_err());
    }
}
