use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use avq_cli::config::{ModelSource, RunConfig};
use avq_cli::error::{CliError, CliResult};
use avq_cli::{canonical, flow, modelio, report};
use avq_core::accel::Precision;
use avq_core::pipeline::{schedule, steady_state_fps, steady_state_interval, StageLatencies};

#[derive(Parser)]
#[command(
    name = "avq",
    about = "Quantize transposed-convolution avatar decoders and simulate their accelerator and pipeline",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct CommonOpts {
    /// JSON run configuration; flags below override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for calibration, evaluation and fixture data.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, short = 'o')]
    output: Option<PathBuf>,
    #[arg(long)]
    calibration_samples: Option<usize>,
    #[arg(long)]
    hessian_samples: Option<usize>,
    #[arg(long)]
    eval_samples: Option<usize>,
    /// Migration-strength exponent in [0, 1].
    #[arg(long)]
    alpha: Option<f32>,
    /// Percentage of channels exempted from smoothing.
    #[arg(long)]
    k_percent: Option<f64>,
    #[arg(long)]
    w_max: Option<f32>,
    #[arg(long)]
    lambda_frac: Option<f64>,
    #[arg(long)]
    weight_bits: Option<u8>,
    #[arg(long)]
    act_bits: Option<u8>,
    /// Seed of the built-in decoder (ignored with --model-dir).
    #[arg(long)]
    model_seed: Option<u64>,
    /// Load the model from a directory instead of generating it.
    #[arg(long)]
    model_dir: Option<PathBuf>,
    /// Disable the outlier-injection knob of the built-in decoder.
    #[arg(long)]
    no_outliers: bool,
    /// Region mask file (TAR1 u8).
    #[arg(long)]
    mask_file: Option<PathBuf>,
    /// Vertex UV file (TAR1 f32, V x 2).
    #[arg(long)]
    uv_file: Option<PathBuf>,
}

impl CommonOpts {
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.output {
            cfg.output_dir = out.clone();
        }
        if let Some(v) = self.calibration_samples {
            cfg.calibration_samples = v;
        }
        if let Some(v) = self.hessian_samples {
            cfg.hessian_samples = v;
        }
        if let Some(v) = self.eval_samples {
            cfg.eval_samples = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.k_percent {
            cfg.k_percent = v;
        }
        if let Some(v) = self.w_max {
            cfg.w_max = v;
        }
        if let Some(v) = self.lambda_frac {
            cfg.lambda_frac = v;
        }
        if let Some(v) = self.weight_bits {
            cfg.weight_bits = v;
        }
        if let Some(v) = self.act_bits {
            cfg.act_bits = v;
        }
        if let Some(dir) = &self.model_dir {
            cfg.model = ModelSource::File { path: dir.clone() };
        } else if self.model_seed.is_some() || self.no_outliers {
            let seed = self.model_seed.unwrap_or(match cfg.model {
                ModelSource::Canonical { seed, .. } => seed,
                _ => 0,
            });
            cfg.model = ModelSource::Canonical {
                seed,
                outlier_injection: !self.no_outliers,
            };
        }
        if let Some(p) = &self.mask_file {
            cfg.mask_file = Some(p.clone());
        }
        if let Some(p) = &self.uv_file {
            cfg.uv_file = Some(p.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    Int8,
    Int4,
}

#[derive(Subcommand)]
enum Command {
    /// Generate calibration latents and per-layer activation statistics.
    Calibrate {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Compute smoothing scales and channel exemptions; write the plan and
    /// the smoothed model.
    Smooth {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Full weight quantization: smoothing, importance-weighted Hessians
    /// and the compensated sweep. Writes the quantized model.
    Quantize {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Evaluate a quantized model against the float reference.
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        /// Quantized model directory (defaults to <output>/quantized).
        #[arg(long)]
        quantized: Option<PathBuf>,
    },
    /// Cycle-level accelerator simulation of the decoder.
    Simulate {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long, value_enum, default_value = "off")]
        combining: OnOff,
        #[arg(long, value_enum, default_value = "int8")]
        precision: PrecisionArg,
        #[arg(long)]
        clock_hz: Option<f64>,
    },
    /// Schedule the five-stage loop and report the steady-state FPS.
    Pipeline {
        #[arg(long, default_value_t = 1.0)]
        sensor: f64,
        #[arg(long, default_value_t = 3.0)]
        encode: f64,
        #[arg(long, default_value_t = 5.0)]
        transmit: f64,
        #[arg(long, default_value_t = 3.0)]
        decode: f64,
        #[arg(long, default_value_t = 9.5)]
        render: f64,
        #[arg(long, default_value_t = 64)]
        frames: usize,
        /// Write the per-frame Gantt rows as CSV.
        #[arg(long)]
        gantt_csv: Option<PathBuf>,
    },
    /// The whole flow: calibrate, smooth, quantize, evaluate, simulate,
    /// schedule; writes every artifact and the report.
    RunAll {
        #[command(flatten)]
        common: CommonOpts,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Calibrate { common } => {
            let cfg = common.resolve()?;
            let model = flow::load_or_build_model(&cfg)?;
            let mask = flow::load_or_build_mask(&cfg)?;
            let calib = canonical::latents(
                report::calibration_seed(cfg.seed),
                cfg.calibration_samples,
            );
            std::fs::create_dir_all(&cfg.output_dir)?;
            let (c, h, w) = (calib[0].channels, calib[0].height, calib[0].width);
            let mut flat = Vec::with_capacity(calib.len() * c * h * w);
            for t in &calib {
                flat.extend_from_slice(&t.data);
            }
            avq_core::tar1::save_f32(
                &cfg.output_dir.join("calibration.tar1"),
                &[calib.len() as u32, c as u32, h as u32, w as u32],
                flat,
            )?;
            let scan =
                flow::scan_calibration(&model, &calib, &mask, cfg.hessian_samples.min(calib.len()))?;
            let stats: Vec<serde_json::Value> = scan
                .channel_max
                .iter()
                .zip(&scan.variance)
                .enumerate()
                .map(|(i, (max, var))| {
                    serde_json::json!({
                        "layer": i,
                        "channel_max": max,
                        "region_variance": var.variances,
                    })
                })
                .collect();
            std::fs::write(
                cfg.output_dir.join("calibration_stats.json"),
                serde_json::to_string_pretty(&stats)?,
            )?;
            println!(
                "calibrate: wrote {} samples and per-layer stats to {:?}",
                calib.len(),
                cfg.output_dir
            );
            Ok(())
        }
        Command::Smooth { common } => {
            let cfg = common.resolve()?;
            let model = flow::load_or_build_model(&cfg)?;
            let mask = flow::load_or_build_mask(&cfg)?;
            let calib = canonical::latents(
                report::calibration_seed(cfg.seed),
                cfg.calibration_samples,
            );
            let scan = flow::scan_calibration(&model, &calib, &mask, 1)?;
            let plan = flow::build_smoothing_plan(&cfg, &model, &scan)?;
            let smoothed = avq_core::smoothing::apply_smoothing(&model, &plan)?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            modelio::save_plan(&cfg.output_dir.join("plan.json"), &plan)?;
            modelio::save_model(&cfg.output_dir.join("smoothed"), &smoothed)?;
            println!(
                "smooth: plan and smoothed model written to {:?}",
                cfg.output_dir
            );
            Ok(())
        }
        Command::Quantize { common } => {
            let cfg = common.resolve()?;
            let artifacts = flow::run_full_flow(&cfg)?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            modelio::save_plan(&cfg.output_dir.join("plan.json"), &artifacts.plan)?;
            modelio::save_quantized(&cfg.output_dir.join("quantized"), &artifacts.quantized_full)?;
            std::fs::write(
                cfg.output_dir.join("manifest.json"),
                serde_json::to_string_pretty(&report::Manifest::for_config(&cfg))?,
            )?;
            println!("quantize: quantized model written to {:?}", cfg.output_dir);
            Ok(())
        }
        Command::Eval { common, quantized } => {
            let cfg = common.resolve()?;
            let qdir = quantized.unwrap_or_else(|| cfg.output_dir.join("quantized"));
            let qmodel = modelio::load_quantized(&qdir)?;
            let model = flow::load_or_build_model(&cfg)?;
            let eval = canonical::latents(report::evaluation_seed(cfg.seed), cfg.eval_samples);
            let mut rows = Vec::new();
            let mut peak = 0.0f32;
            let refs: Vec<_> = eval
                .iter()
                .map(|x| avq_core::conv::forward(&model, x))
                .collect::<Result<_, _>>()
                .map_err(CliError::from)?;
            for r in &refs {
                peak = peak.max(r.max_abs());
            }
            for (i, (x, y_ref)) in eval.iter().zip(&refs).enumerate() {
                let y = avq_core::quant::fake_quant_forward(&qmodel, x)?;
                let mse: f64 = y_ref
                    .data
                    .iter()
                    .zip(y.data.iter())
                    .map(|(a, b)| {
                        let d = (*a - *b) as f64;
                        d * d
                    })
                    .sum::<f64>()
                    / y.data.len() as f64;
                let psnr = 10.0 * ((peak as f64).powi(2) / mse.max(1e-30)).log10();
                rows.push(serde_json::json!({ "index": i, "mse": mse, "psnr": psnr }));
            }
            let out = serde_json::json!({
                "psnr_peak_reference": peak,
                "views": rows,
            });
            std::fs::create_dir_all(&cfg.output_dir)?;
            std::fs::write(
                cfg.output_dir.join("eval.json"),
                serde_json::to_string_pretty(&out)?,
            )?;
            println!("{}", serde_json::to_string_pretty(&out)?);
            Ok(())
        }
        Command::Simulate {
            common,
            combining,
            precision,
            clock_hz,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(hz) = clock_hz {
                cfg.clock_hz = hz;
                cfg.validate()?;
            }
            let model = flow::load_or_build_model(&cfg)?;
            let x = canonical::latents(report::evaluation_seed(cfg.seed), 1).remove(0);
            let array = cfg.array_config(
                match precision {
                    PrecisionArg::Int8 => Precision::Int8,
                    PrecisionArg::Int4 => Precision::Int4,
                },
                matches!(combining, OnOff::On),
            );
            let report = avq_core::accel::simulate_decoder(&model, &x, &array, cfg.clock_hz)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Pipeline {
            sensor,
            encode,
            transmit,
            decode,
            render,
            frames,
            gantt_csv,
        } => {
            let lat = StageLatencies::new(sensor, encode, transmit, decode, render)
                .map_err(|e| CliError::Config(e.to_string()))?;
            let sched = schedule(&lat, frames)?;
            let out = serde_json::json!({
                "steady_state_interval_ms": steady_state_interval(&sched)?,
                "fps": steady_state_fps(&sched)?,
                "single_frame_latency_ms": sched.frame_latency(0),
                "schedule": sched.jobs,
            });
            if let Some(path) = gantt_csv {
                flow::write_schedule_csv(&path, &sched)?;
            }
            println!("{}", serde_json::to_string_pretty(&out)?);
            Ok(())
        }
        Command::RunAll { common } => {
            let cfg = common.resolve()?;
            let artifacts = flow::run_full_flow(&cfg)?;
            flow::write_artifacts(&cfg, &artifacts)?;
            println!(
                "run-all: report, manifest, plan, quantized model and schedule written to {:?}",
                cfg.output_dir
            );
            println!(
                "  W{}A{} mean MSE {:.6e} (round-to-nearest {:.6e}), speedup x{:.2}, {:.1} FPS",
                cfg.weight_bits,
                cfg.act_bits,
                artifacts.report.summary.mean_mse_full,
                artifacts.report.summary.mean_mse_rtn,
                artifacts.report.simulator.speedup_combining,
                artifacts.report.pipeline.fps
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
