//! Command-line surface: activation approximation, plan inspection, cost
//! reporting and simulated inference.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 infeasible
//! plan. The SLOTPACK_PARAMS environment variable overrides --params.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use slotpack::act::PolyApprox;
use slotpack::conv::predict_counts;
use slotpack::engine::HeParams;
use slotpack::io::{load_tensor, manifest_dir, parse_params, ModelManifest, ParamSpec};
use slotpack::model::{random_weights, ConvKind, NetConfig, NetWeights};
use slotpack::netplan::{
    bootstrap_count, build_resnet, cost_report_static, place_bootstraps, plan_layers, run_batch,
    NetworkPlan, PlanError,
};
use slotpack::oracle;
use slotpack::packing::Tensor3;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;

#[derive(Parser)]
#[command(
    name = "slotpack",
    about = "CNN inference under simulated RNS-CKKS slot semantics",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Emit the polynomial activation approximation as JSON.
    Approx {
        #[arg(long, value_enum, default_value_t = ApproxFn::Silu)]
        function: ApproxFn,
        #[arg(long, default_value_t = 5)]
        degree: usize,
        /// Half-width B of the symmetric approximation interval [-B, B].
        #[arg(long = "interval-b", default_value_t = 8.0)]
        interval_b: f64,
        #[arg(long = "quad-order", default_value_t = 64)]
        quad_order: usize,
    },
    /// Build and place a network plan; report layers and bootstraps.
    Plan {
        #[command(flatten)]
        model: ModelArgs,
        /// Scheme parameters, e.g. "L=26,boot=14,slots=16384".
        #[arg(long)]
        params: Option<String>,
    },
    /// Static cost estimate and plaintext-kernel counts for a plan.
    Cost {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        params: Option<String>,
    },
    /// Run simulated inference on packed tensor files.
    Infer {
        #[command(flatten)]
        model: ModelArgs,
        /// Input tensor file(s) in the SLT1 binary format.
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        /// Also run the plaintext oracle and report the logit difference.
        #[arg(long = "compare-oracle")]
        compare_oracle: bool,
        #[arg(long)]
        params: Option<String>,
        /// Worker threads for batch execution (defaults to all cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ApproxFn {
    Silu,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConvFlavor {
    /// Traditional convolution in every stage.
    Traditional,
    /// Traditional first stage, depthwise-separable ConvBN afterwards.
    Dsc,
}

#[derive(Args)]
struct ModelArgs {
    /// Model manifest (JSON). Mutually exclusive with --arch.
    #[arg(long, conflicts_with = "arch")]
    model: Option<PathBuf>,
    /// Built-in architecture: resnet20 or resnet20-quarter.
    #[arg(long)]
    arch: Option<String>,
    /// Seed for deterministic random weights (used with --arch).
    #[arg(long = "random-weights")]
    random_weights: Option<u64>,
    /// Override the convolution flavor of the residual stages.
    #[arg(long, value_enum)]
    conv: Option<ConvFlavor>,
}

fn effective_params(cli_value: Option<&str>) -> Result<ParamSpec, anyhow::Error> {
    let s = match std::env::var("SLOTPACK_PARAMS") {
        Ok(env) => Some(env),
        Err(_) => cli_value.map(str::to_string),
    };
    match s {
        Some(s) => parse_params(&s).map_err(|e| anyhow!(e)),
        None => Ok(ParamSpec::default()),
    }
}

fn resolve_model(args: &ModelArgs) -> Result<(NetConfig, NetWeights), anyhow::Error> {
    let (mut cfg, weights) = if let Some(path) = &args.model {
        let manifest = ModelManifest::load(path)
            .with_context(|| format!("loading manifest {}", path.display()))?;
        let weights = manifest.resolve_weights(&manifest_dir(path))?;
        (manifest.config, Some(weights))
    } else {
        let arch = args.arch.as_deref().unwrap_or("resnet20-quarter");
        let cfg = match arch {
            "resnet20" => NetConfig::resnet20(),
            "resnet20-quarter" => NetConfig::resnet20_quarter(),
            other => return Err(anyhow!("unknown architecture {other:?}")),
        };
        (cfg, None)
    };
    if let Some(flavor) = args.conv {
        for (i, kind) in cfg.stage_kinds.iter_mut().enumerate() {
            *kind = match flavor {
                ConvFlavor::Traditional => ConvKind::Traditional,
                ConvFlavor::Dsc => {
                    if i == 0 {
                        ConvKind::Traditional
                    } else {
                        ConvKind::DepthwiseSeparable
                    }
                }
            };
        }
    }
    let weights = match weights {
        // a --conv override invalidates manifest weights shaped for the
        // original stage kinds, so regenerate when a seed is given
        Some(w) if args.conv.is_none() => w,
        _ => random_weights(&cfg, args.random_weights.unwrap_or(0)),
    };
    Ok((cfg, weights))
}

fn build_placed_plan(
    cfg: &NetConfig,
    spec: ParamSpec,
) -> Result<(NetworkPlan, HeParams), anyhow::Error> {
    let he = HeParams::new(spec.n_slots, spec.max_level, spec.boot_depth)?;
    if spec.n_slots != cfg.f_max {
        return Err(anyhow!(
            "slot count {} does not match the model's capacity {}",
            spec.n_slots,
            cfg.f_max
        ));
    }
    let plan = build_resnet(cfg)?;
    let placed = place_bootstraps(&plan, &he)?;
    Ok((placed, he))
}

fn emit<T: Serialize>(value: &T) -> Result<(), anyhow::Error> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn cmd_approx(
    degree: usize,
    interval_b: f64,
    quad_order: usize,
) -> Result<(), anyhow::Error> {
    #[derive(Serialize)]
    struct ApproxReport {
        function: &'static str,
        #[serde(flatten)]
        approx: PolyApprox,
    }
    let approx = PolyApprox::silu_default(degree, interval_b, quad_order)?;
    emit(&ApproxReport { function: "silu", approx })
}

#[derive(Serialize)]
struct PlanLayerRow {
    name: String,
    kind: slotpack::netplan::LayerKind,
    c_i: usize,
    c_o: usize,
    stride: usize,
    n_block_in: usize,
    n_block_out: usize,
    depth_cost: u32,
}

fn cmd_plan(model: &ModelArgs, params: Option<&str>) -> Result<(), anyhow::Error> {
    let spec = effective_params(params)?;
    let (cfg, _) = resolve_model(model)?;
    let (placed, he) = build_placed_plan(&cfg, spec)?;
    #[derive(Serialize)]
    struct PlanReport {
        architecture: String,
        max_level: u32,
        boot_depth: u32,
        usable_level: u32,
        bootstrap_count: u64,
        total_depth_cost: u32,
        layers: Vec<PlanLayerRow>,
    }
    let layers: Vec<PlanLayerRow> = plan_layers(&placed)
        .into_iter()
        .map(|l| PlanLayerRow {
            name: l.name.clone(),
            kind: l.kind,
            c_i: l.c_i,
            c_o: l.c_o,
            stride: l.stride,
            n_block_in: l.layout_in.n_block,
            n_block_out: l.layout_out.n_block,
            depth_cost: l.depth_cost,
        })
        .collect();
    emit(&PlanReport {
        architecture: cfg.name.clone(),
        max_level: he.max_level,
        boot_depth: he.boot_depth,
        usable_level: he.usable_level(),
        bootstrap_count: bootstrap_count(&placed.ops),
        total_depth_cost: layers.iter().map(|l| l.depth_cost).sum(),
        layers,
    })
}

fn cmd_cost(model: &ModelArgs, params: Option<&str>) -> Result<(), anyhow::Error> {
    let spec = effective_params(params)?;
    let (cfg, _) = resolve_model(model)?;
    let (placed, he) = build_placed_plan(&cfg, spec)?;
    let report = cost_report_static(&placed, &he)?;
    let c_last = *cfg.widths.last().unwrap();
    let dsc = predict_counts(ConvKind::DepthwiseSeparable, 3, c_last, c_last);
    let trad = predict_counts(ConvKind::Traditional, 3, c_last, c_last);
    #[derive(Serialize)]
    struct CostOut {
        architecture: String,
        dsc_traditional_mult_ratio: f64,
        #[serde(flatten)]
        report: slotpack::netplan::CostReport,
    }
    emit(&CostOut {
        architecture: cfg.name.clone(),
        dsc_traditional_mult_ratio: dsc.mults as f64 / trad.mults as f64,
        report,
    })
}

fn cmd_infer(
    model: &ModelArgs,
    inputs: &[PathBuf],
    compare_oracle: bool,
    params: Option<&str>,
    jobs: Option<usize>,
) -> Result<(), anyhow::Error> {
    let spec = effective_params(params)?;
    let (cfg, weights) = resolve_model(model)?;
    let (placed, he) = build_placed_plan(&cfg, spec)?;

    let tensors: Vec<Tensor3> = inputs
        .iter()
        .map(|p| load_tensor(p).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<_, _>>()?;

    let results = run_with_jobs(jobs, || run_batch(&placed, &weights, &he, &tensors))?;

    #[derive(Serialize)]
    struct InputReport {
        file: String,
        logits: Vec<f64>,
        argmax: usize,
        seconds: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        oracle_max_abs_diff: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        oracle_argmax_match: Option<bool>,
    }
    #[derive(Serialize)]
    struct InferReport {
        architecture: String,
        inputs: Vec<InputReport>,
        total_seconds: f64,
        amortized_seconds: f64,
        bootstrap_count_per_input: u64,
    }

    let mut rows = Vec::new();
    let mut total_seconds = 0.0;
    for (path, result) in inputs.iter().zip(&results) {
        total_seconds += result.report.total_seconds;
        let argmax = argmax(&result.logits);
        let (diff, matches) = if compare_oracle {
            let t = load_tensor(path)?;
            let want = oracle::forward_ref(&placed, &weights, &t, oracle::ActMode::Poly)
                .map_err(|e| anyhow!(e))?;
            let diff = result
                .logits
                .iter()
                .zip(&want)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            (Some(diff), Some(argmax == argmax_of(&want)))
        } else {
            (None, None)
        };
        rows.push(InputReport {
            file: path.display().to_string(),
            logits: result.logits.clone(),
            argmax,
            seconds: result.report.total_seconds,
            oracle_max_abs_diff: diff,
            oracle_argmax_match: matches,
        });
    }
    let n = results.len().max(1) as f64;
    emit(&InferReport {
        architecture: cfg.name.clone(),
        inputs: rows,
        total_seconds,
        amortized_seconds: total_seconds / n,
        bootstrap_count_per_input: results
            .first()
            .map_or(0, |r| r.report.bootstrap_count),
    })
}

fn argmax(v: &[f64]) -> usize {
    argmax_of(v)
}

fn argmax_of(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0)
}

#[cfg(feature = "parallel")]
fn run_with_jobs<T>(
    jobs: Option<usize>,
    f: impl FnOnce() -> Result<T, PlanError> + Send,
) -> Result<T, anyhow::Error>
where
    T: Send,
{
    match jobs {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build()?;
            Ok(pool.install(f)?)
        }
        None => Ok(f()?),
    }
}

#[cfg(not(feature = "parallel"))]
fn run_with_jobs<T>(
    _jobs: Option<usize>,
    f: impl FnOnce() -> Result<T, PlanError>,
) -> Result<T, anyhow::Error> {
    Ok(f()?)
}

fn is_infeasible(err: &anyhow::Error) -> bool {
    err.downcast_ref::<PlanError>()
        .map_or(false, |e| matches!(e, PlanError::InfeasiblePlan { .. }))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    return ExitCode::SUCCESS;
                }
                _ => EXIT_USAGE,
            };
            eprint!("{e}");
            return ExitCode::from(code);
        }
    };
    let result = match &cli.cmd {
        Cmd::Approx { function: ApproxFn::Silu, degree, interval_b, quad_order } => {
            cmd_approx(*degree, *interval_b, *quad_order)
        }
        Cmd::Plan { model, params } => cmd_plan(model, params.as_deref()),
        Cmd::Cost { model, params } => cmd_cost(model, params.as_deref()),
        Cmd::Infer { model, input, compare_oracle, params, jobs } => {
            cmd_infer(model, input, *compare_oracle, params.as_deref(), *jobs)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_infeasible(&e) {
                ExitCode::from(EXIT_INFEASIBLE)
            } else {
                ExitCode::from(EXIT_DATA)
            }
        }
    }
}
