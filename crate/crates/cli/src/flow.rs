//! The calibrate -> smooth -> quantize -> evaluate -> simulate -> schedule
//! flow, assembled from the core modules.
//!
//! Three quantized variants come out of one run: the full flow (smoothing,
//! channel exemption, importance-weighted sweep), a sweep without the
//! importance map (uniform weighting) on the same smoothed model, and a
//! plain round-to-nearest baseline on the original model. The report
//! compares them per evaluation view.

use avq_core::accel::{simulate_decoder, Precision, SimReport};
use avq_core::conv::{forward, forward_collect};
use avq_core::pipeline::{schedule, steady_state_fps, steady_state_interval, Schedule};
use avq_core::quant::{
    fake_quant_forward, quantize_model, quantize_model_rtn, QuantGrid, QuantizedModel,
    WeightedHessian,
};
use avq_core::smoothing::{
    apply_smoothing, build_plan, channel_region_variance, compute_icas_scales_from_maxima,
    exempt_count, ChannelVarianceReport, RegionMask, SmoothingPlan,
};
use avq_core::tensor::{DecoderModel, Tensor3};
use avq_core::uvmap::{build_uv_map, downsample_uv, UVImportanceMap};

use crate::canonical::{canonical_decoder, latents};
use crate::config::{ModelSource, RunConfig};
use crate::error::{CliError, CliResult};
use crate::fixtures::{facial_region_mask, facial_uv_vertices};
use crate::modelio;
use crate::report::{
    self, EvalReport, LayerWeightError, Manifest, PipelineReport, SimSummary, SimulatorReport,
    SummaryReport, ViewReport,
};

pub fn load_or_build_model(cfg: &RunConfig) -> CliResult<DecoderModel> {
    match &cfg.model {
        ModelSource::Canonical {
            seed,
            outlier_injection,
        } => Ok(canonical_decoder(*seed, *outlier_injection)),
        ModelSource::File { path } => modelio::load_model(path),
    }
}

pub fn load_or_build_mask(cfg: &RunConfig) -> CliResult<RegionMask> {
    match &cfg.mask_file {
        Some(path) => modelio::load_mask(path),
        None => Ok(facial_region_mask(cfg.texture_size, cfg.texture_size)),
    }
}

pub fn load_or_build_uv_map(cfg: &RunConfig) -> CliResult<UVImportanceMap> {
    let verts = match &cfg.uv_file {
        Some(path) => modelio::load_uv_vertices(path)?,
        None => facial_uv_vertices(report::uv_seed(cfg.seed), cfg.texture_size, cfg.uv_vertices),
    };
    Ok(build_uv_map(
        &verts,
        cfg.texture_size,
        cfg.texture_size,
        cfg.w_max,
    )?)
}

/// Streaming statistics of one calibration pass.
pub struct CalibrationScan {
    /// Per-layer per-channel max |activation| over every sample.
    pub channel_max: Vec<Vec<f32>>,
    /// Per-layer variance reports averaged over samples (region-masked).
    pub variance: Vec<ChannelVarianceReport>,
    /// Per-layer pooled activation values (for grid calibration).
    pub act_pools: Vec<Vec<f32>>,
    /// Per-layer inputs of the first `kept` samples (for Hessians).
    pub kept_inputs: Vec<Vec<Tensor3>>,
}

/// One pass over the calibration set collecting everything the smoothing
/// and quantization stages need.
pub fn scan_calibration(
    model: &DecoderModel,
    calib: &[Tensor3],
    mask: &RegionMask,
    keep: usize,
) -> CliResult<CalibrationScan> {
    if calib.is_empty() {
        return Err(CliError::Numerical(avq_core::Error::EmptyCalibration));
    }
    let n_layers = model.layers.len();
    let mut channel_max: Vec<Vec<f32>> = model
        .layers
        .iter()
        .map(|l| vec![0.0f32; l.weights.in_channels])
        .collect();
    let mut var_sums: Vec<Vec<f64>> = model
        .layers
        .iter()
        .map(|l| vec![0.0f64; l.weights.in_channels])
        .collect();
    let mut mean_sums = var_sums.clone();
    let mut act_pools: Vec<Vec<f32>> = vec![Vec::new(); n_layers];
    let mut kept_inputs: Vec<Vec<Tensor3>> = vec![Vec::new(); n_layers];
    // Masks resampled once per layer spatial size. At coarse layers the
    // region can vanish entirely; variance then ranks over the full map.
    let widths = model.spatial_chain(calib[0].width).map_err(CliError::from)?;
    let layer_masks: Vec<RegionMask> = widths[..n_layers]
        .iter()
        .map(|w| {
            let resized = mask.resize_nearest(*w, *w);
            if resized.member_count() == 0 {
                RegionMask::full(*w, *w)
            } else {
                resized
            }
        })
        .collect();
    let mut scan_err: Option<avq_core::Error> = None;
    for (si, x) in calib.iter().enumerate() {
        forward_collect(model, x, &mut |i, t| {
            if scan_err.is_some() {
                return;
            }
            for (c, m) in channel_max[i].iter_mut().enumerate() {
                for v in t.channel(c) {
                    *m = m.max(v.abs());
                }
            }
            match channel_region_variance(t, &layer_masks[i]) {
                Ok(rep) => {
                    for c in 0..rep.variances.len() {
                        var_sums[i][c] += rep.variances[c];
                        mean_sums[i][c] += rep.means[c];
                    }
                }
                Err(e) => scan_err = Some(e),
            }
            act_pools[i].extend_from_slice(&t.data);
            if si < keep {
                kept_inputs[i].push(t.clone());
            }
        })?;
        if let Some(e) = scan_err.take() {
            return Err(e.into());
        }
    }
    let inv = 1.0 / calib.len() as f64;
    let variance = (0..n_layers)
        .map(|i| {
            let variances: Vec<f64> = var_sums[i].iter().map(|v| v * inv).collect();
            let means: Vec<f64> = mean_sums[i].iter().map(|v| v * inv).collect();
            let mut ranking: Vec<usize> = (0..variances.len()).collect();
            ranking.sort_by(|&a, &b| {
                variances[b]
                    .partial_cmp(&variances[a])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            ChannelVarianceReport {
                variances,
                means,
                ranking,
            }
        })
        .collect();
    Ok(CalibrationScan {
        channel_max,
        variance,
        act_pools,
        kept_inputs,
    })
}

/// Migration scales plus variance-ranked exemption for every layer.
pub fn build_smoothing_plan(
    cfg: &RunConfig,
    model: &DecoderModel,
    scan: &CalibrationScan,
) -> CliResult<SmoothingPlan> {
    let mut scales = Vec::with_capacity(model.layers.len());
    let mut exempt = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        scales.push(compute_icas_scales_from_maxima(
            &scan.channel_max[i],
            &layer.weights,
            cfg.alpha,
        )?);
        let n = exempt_count(layer.weights.in_channels, cfg.k_percent);
        let mut set: Vec<usize> = scan.variance[i].ranking[..n].to_vec();
        set.sort_unstable();
        exempt.push(set);
    }
    Ok(build_plan(cfg.alpha, scales, exempt))
}

/// Per-layer importance maps at each layer's input size.
pub fn layer_maps(
    model: &DecoderModel,
    map: &UVImportanceMap,
) -> CliResult<Vec<UVImportanceMap>> {
    let widths = model.spatial_chain(crate::canonical::LATENT_WIDTH)?;
    widths[..model.layers.len()]
        .iter()
        .map(|w| downsample_uv(map, *w, *w).map_err(CliError::from))
        .collect()
}

/// Importance-weighted Hessian per layer from kept calibration inputs.
pub fn layer_hessians(
    cfg: &RunConfig,
    model: &DecoderModel,
    kept_inputs: &[Vec<Tensor3>],
    maps: Option<&[UVImportanceMap]>,
) -> CliResult<Vec<WeightedHessian>> {
    let mut hessians = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        let samples = &kept_inputs[i];
        let uniform;
        let map = match maps {
            Some(maps) => &maps[i],
            None => {
                let w = samples
                    .first()
                    .ok_or(CliError::Numerical(avq_core::Error::EmptySamples))?;
                uniform = UVImportanceMap::uniform(w.height, w.width);
                &uniform
            }
        };
        hessians.push(avq_core::quant::weighted_hessian(
            samples,
            map,
            &layer.spec,
            cfg.lambda_frac,
        )?);
    }
    Ok(hessians)
}

fn mse(a: &Tensor3, b: &Tensor3) -> f64 {
    a.data
        .iter()
        .zip(b.data.iter())
        .map(|(x, y)| {
            let d = (*x - *y) as f64;
            d * d
        })
        .sum::<f64>()
        / a.data.len() as f64
}

fn weighted_mse(a: &Tensor3, b: &Tensor3, map: &UVImportanceMap) -> f64 {
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for c in 0..a.channels {
        for y in 0..a.height {
            for x in 0..a.width {
                let w = map.at(y, x) as f64;
                let d = (a.at(c, y, x) - b.at(c, y, x)) as f64;
                num += w * d * d;
                den += w;
            }
        }
    }
    num / den.max(1e-30)
}

fn psnr(peak: f64, mse: f64) -> f64 {
    10.0 * (peak * peak / mse.max(1e-30)).log10()
}

fn layer_weight_mse(model: &DecoderModel, q: &QuantizedModel) -> Vec<f64> {
    model
        .layers
        .iter()
        .zip(&q.layers)
        .map(|(l, ql)| {
            let w_mat = avq_core::quant::unfold_for_spec(&l.spec, &l.weights);
            let deq = ql.weights.dequantized_mat();
            w_mat
                .iter()
                .zip(deq.iter())
                .map(|(a, b)| {
                    let d = (*a - *b) as f64;
                    d * d
                })
                .sum::<f64>()
                / w_mat.len() as f64
        })
        .collect()
}

pub struct FlowArtifacts {
    pub model: DecoderModel,
    pub smoothed: DecoderModel,
    pub plan: SmoothingPlan,
    pub uv_map: UVImportanceMap,
    pub mask: RegionMask,
    pub quantized_full: QuantizedModel,
    pub quantized_unweighted: QuantizedModel,
    pub quantized_rtn: QuantizedModel,
    pub report: EvalReport,
    pub schedule: Schedule,
}

/// Run every stage and assemble the report. Pure in-memory; the CLI layer
/// decides what to persist.
pub fn run_full_flow(cfg: &RunConfig) -> CliResult<FlowArtifacts> {
    cfg.validate()?;
    let model = load_or_build_model(cfg)?;
    let mask = load_or_build_mask(cfg)?;
    let uv_map = load_or_build_uv_map(cfg)?;
    let calib = latents(report::calibration_seed(cfg.seed), cfg.calibration_samples);
    let keep = cfg.hessian_samples.min(cfg.calibration_samples);

    // Pass A over the original model: scales, exemption, RTN grids.
    let scan_a = scan_calibration(&model, &calib, &mask, keep)?;
    let plan = build_smoothing_plan(cfg, &model, &scan_a)?;
    let smoothed = apply_smoothing(&model, &plan)?;
    let rtn_grids: Vec<QuantGrid> = scan_a
        .act_pools
        .iter()
        .map(|pool| QuantGrid::asymmetric_per_tensor(pool, cfg.act_bits, cfg.clip_percentile))
        .collect::<Result<_, _>>()
        .map_err(CliError::from)?;

    // Pass B over the smoothed model: grids and Hessian inputs.
    let scan_b = scan_calibration(&smoothed, &calib, &mask, keep)?;
    let act_grids: Vec<QuantGrid> = scan_b
        .act_pools
        .iter()
        .map(|pool| QuantGrid::asymmetric_per_tensor(pool, cfg.act_bits, cfg.clip_percentile))
        .collect::<Result<_, _>>()
        .map_err(CliError::from)?;

    let maps = layer_maps(&smoothed, &uv_map)?;
    let h_uv = layer_hessians(cfg, &smoothed, &scan_b.kept_inputs, Some(&maps))?;
    let h_plain = layer_hessians(cfg, &smoothed, &scan_b.kept_inputs, None)?;

    let quantized_full = quantize_model(
        &smoothed,
        &h_uv,
        act_grids.clone(),
        cfg.weight_bits,
        cfg.compensation,
    )?;
    let quantized_unweighted = quantize_model(
        &smoothed,
        &h_plain,
        act_grids,
        cfg.weight_bits,
        cfg.compensation,
    )?;
    let quantized_rtn = quantize_model_rtn(&model, rtn_grids, cfg.weight_bits)?;

    // Evaluation views.
    let eval = latents(report::evaluation_seed(cfg.seed), cfg.eval_samples);
    let refs: Vec<Tensor3> = eval
        .iter()
        .map(|x| forward(&model, x))
        .collect::<Result<_, _>>()
        .map_err(CliError::from)?;
    let peak = refs.iter().fold(0.0f32, |m, t| m.max(t.max_abs())) as f64;
    let out_map = downsample_uv(&uv_map, refs[0].height, refs[0].width)?;
    let mut views = Vec::with_capacity(eval.len());
    for (i, (x, y_ref)) in eval.iter().zip(&refs).enumerate() {
        let y_full = fake_quant_forward(&quantized_full, x)?;
        let y_unw = fake_quant_forward(&quantized_unweighted, x)?;
        let y_rtn = fake_quant_forward(&quantized_rtn, x)?;
        let mse_full = mse(y_ref, &y_full);
        let mse_rtn = mse(y_ref, &y_rtn);
        views.push(ViewReport {
            index: i,
            mse_full,
            psnr_full: psnr(peak, mse_full),
            mse_rtn,
            psnr_rtn: psnr(peak, mse_rtn),
            mse_gptq_unweighted: mse(y_ref, &y_unw),
            uvw_mse_full: weighted_mse(y_ref, &y_full, &out_map),
            uvw_mse_unweighted: weighted_mse(y_ref, &y_unw, &out_map),
        });
    }
    let n = views.len() as f64;
    let summary = SummaryReport {
        mean_mse_full: views.iter().map(|v| v.mse_full).sum::<f64>() / n,
        mean_mse_rtn: views.iter().map(|v| v.mse_rtn).sum::<f64>() / n,
        mean_psnr_full: views.iter().map(|v| v.psnr_full).sum::<f64>() / n,
        mean_psnr_rtn: views.iter().map(|v| v.psnr_rtn).sum::<f64>() / n,
        mean_uvw_mse_full: views.iter().map(|v| v.uvw_mse_full).sum::<f64>() / n,
        mean_uvw_mse_unweighted: views.iter().map(|v| v.uvw_mse_unweighted).sum::<f64>() / n,
    };
    let swept_err = layer_weight_mse(&smoothed, &quantized_full);
    let rtn_err = layer_weight_mse(&model, &quantized_rtn);
    let per_layer_weight_error = swept_err
        .into_iter()
        .zip(rtn_err)
        .enumerate()
        .map(|(layer, (mse_swept, mse_rtn))| LayerWeightError {
            layer,
            mse_swept,
            mse_rtn,
        })
        .collect();

    // Accelerator simulation on the first evaluation view's activations.
    let sim_input = &eval[0];
    let sim = |precision: Precision, combining: bool| -> CliResult<SimReport> {
        Ok(simulate_decoder(
            &model,
            sim_input,
            &cfg.array_config(precision, combining),
            cfg.clock_hz,
        )?)
    };
    let int8_baseline = sim(Precision::Int8, false)?;
    let int8_combining = sim(Precision::Int8, true)?;
    let int4_baseline = sim(Precision::Int4, false)?;
    let int4_combining = sim(Precision::Int4, true)?;
    let simulator = SimulatorReport {
        speedup_combining: int8_baseline.total_cycles / int8_combining.total_cycles,
        int4_speedup_over_int8_combining: int8_combining.latency_ms / int4_combining.latency_ms,
        int8_baseline: SimSummary::from(&int8_baseline),
        int8_combining: SimSummary::from(&int8_combining),
        int4_baseline: SimSummary::from(&int4_baseline),
        int4_combining: SimSummary::from(&int4_combining),
    };

    // Pipeline schedule.
    let sched = schedule(&cfg.pipeline, cfg.pipeline_frames)?;
    let pipeline = PipelineReport {
        steady_state_interval_ms: steady_state_interval(&sched)?,
        fps: steady_state_fps(&sched)?,
        single_frame_latency_ms: sched.frame_latency(0),
    };

    let report = EvalReport {
        psnr_peak_reference: peak,
        views,
        summary,
        per_layer_weight_error,
        simulator,
        pipeline,
    };
    report::validate_report(&report)?;
    Ok(FlowArtifacts {
        model,
        smoothed,
        plan,
        uv_map,
        mask,
        quantized_full,
        quantized_unweighted,
        quantized_rtn,
        report,
        schedule: sched,
    })
}

/// Persist a run's artifacts into the output directory.
pub fn write_artifacts(cfg: &RunConfig, artifacts: &FlowArtifacts) -> CliResult<()> {
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(&artifacts.report)?,
    )?;
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&Manifest::for_config(cfg))?,
    )?;
    modelio::save_plan(&dir.join("plan.json"), &artifacts.plan)?;
    modelio::save_quantized(&dir.join("quantized"), &artifacts.quantized_full)?;
    modelio::save_mask(&dir.join("mask.tar1"), &artifacts.mask)?;
    write_schedule_csv(&dir.join("schedule.csv"), &artifacts.schedule)?;
    Ok(())
}

/// Gantt export: one `frame,stage,start_ms,end_ms` row per job.
pub fn write_schedule_csv(path: &std::path::Path, sched: &Schedule) -> CliResult<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "frame,stage,start_ms,end_ms")?;
    for job in &sched.jobs {
        writeln!(
            f,
            "{},{},{},{}",
            job.frame,
            match job.stage {
                avq_core::pipeline::Stage::Sensor => "sensor",
                avq_core::pipeline::Stage::Encode => "encode",
                avq_core::pipeline::Stage::TransmitIn => "transmit_in",
                avq_core::pipeline::Stage::TransmitOut => "transmit_out",
                avq_core::pipeline::Stage::Decode => "decode",
                avq_core::pipeline::Stage::Render => "render",
            },
            job.start_ms,
            job.end_ms
        )?;
    }
    Ok(())
}
