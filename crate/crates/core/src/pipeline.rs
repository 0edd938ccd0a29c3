//! Discrete-event model of the five-stage telepresence loop.
//!
//! Resources: a free-running camera, one accelerator executing encode and
//! decode, a half-duplex link carrying the outbound and the inbound latent
//! of every frame, and a renderer. Decode of frame k waits for encode k
//! (shared accelerator) and for the inbound transmission k, whose readiness
//! mirrors the local encode (symmetric peer in lockstep). Within a resource,
//! earlier frames run first; encode precedes decode and the decode-critical
//! inbound transfer precedes the outbound one at equal priority. The link's
//! two transfers per frame are what pin the steady-state interval to twice
//! the transmission delay when the link is the bottleneck.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageLatencies {
    pub sensor_ms: f64,
    pub encode_ms: f64,
    pub transmit_ms: f64,
    pub decode_ms: f64,
    pub render_ms: f64,
}

impl StageLatencies {
    pub fn new(
        sensor_ms: f64,
        encode_ms: f64,
        transmit_ms: f64,
        decode_ms: f64,
        render_ms: f64,
    ) -> Result<Self> {
        for (name, v) in [
            ("sensor", sensor_ms),
            ("encode", encode_ms),
            ("transmit", transmit_ms),
            ("decode", decode_ms),
            ("render", render_ms),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidLayer(format!(
                    "{name} latency must be a nonnegative finite real, got {v}"
                )));
            }
        }
        Ok(Self {
            sensor_ms,
            encode_ms,
            transmit_ms,
            decode_ms,
            render_ms,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Sensor,
    Encode,
    TransmitIn,
    TransmitOut,
    Decode,
    Render,
}

pub const STAGES: [Stage; 6] = [
    Stage::Sensor,
    Stage::Encode,
    Stage::TransmitIn,
    Stage::TransmitOut,
    Stage::Decode,
    Stage::Render,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ResourceId {
    Camera,
    Accelerator,
    Link,
    Renderer,
}

impl Stage {
    fn resource(self) -> ResourceId {
        match self {
            Stage::Sensor => ResourceId::Camera,
            Stage::Encode | Stage::Decode => ResourceId::Accelerator,
            Stage::TransmitIn | Stage::TransmitOut => ResourceId::Link,
            Stage::Render => ResourceId::Renderer,
        }
    }

}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduledJob {
    pub frame: usize,
    pub stage: Stage,
    pub start_ms: f64,
    pub end_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub horizon: usize,
    pub latencies: StageLatencies,
    /// One entry per (frame, stage), frames major, [`STAGES`] order.
    pub jobs: Vec<ScheduledJob>,
}

impl Schedule {
    pub fn job(&self, frame: usize, stage: Stage) -> &ScheduledJob {
        let si = STAGES.iter().position(|s| *s == stage).unwrap();
        &self.jobs[frame * STAGES.len() + si]
    }

    pub fn render_completions(&self) -> Vec<f64> {
        (0..self.horizon)
            .map(|f| self.job(f, Stage::Render).end_ms)
            .collect()
    }

    /// End-to-end latency of one frame, sensor start to render end.
    pub fn frame_latency(&self, frame: usize) -> f64 {
        self.job(frame, Stage::Render).end_ms - self.job(frame, Stage::Sensor).start_ms
    }
}

fn duration(stage: Stage, lat: &StageLatencies) -> f64 {
    match stage {
        Stage::Sensor => lat.sensor_ms,
        Stage::Encode => lat.encode_ms,
        Stage::TransmitIn | Stage::TransmitOut => lat.transmit_ms,
        Stage::Decode => lat.decode_ms,
        Stage::Render => lat.render_ms,
    }
}

fn preds(frame: usize, stage: Stage) -> Vec<(usize, Stage)> {
    match stage {
        Stage::Sensor => vec![],
        Stage::Encode => vec![(frame, Stage::Sensor)],
        Stage::TransmitIn | Stage::TransmitOut => vec![(frame, Stage::Encode)],
        Stage::Decode => vec![(frame, Stage::Encode), (frame, Stage::TransmitIn)],
        Stage::Render => vec![(frame, Stage::Decode)],
    }
}

/// Non-preemptive list scheduling under the precedence and resource
/// constraints above.
///
/// Within a stage, earlier frames always run first. The camera, link and
/// renderer pick the oldest ready job (the link serving the decode-critical
/// inbound transfer before the outbound one at equal frame). The
/// accelerator alternates between encode and decode service, starting with
/// encode, falling back to the other kind when its preferred kind has no
/// ready job; the alternation keeps per-frame pairs interleaved so the
/// steady state paces at `encode + decode` instead of drifting into long
/// batched bursts.
pub fn schedule(lat: &StageLatencies, frames: usize) -> Result<Schedule> {
    if frames < 1 {
        return Err(Error::HorizonTooShort { frames, min: 1 });
    }
    let n_stages = STAGES.len();
    let stage_pos = |stage: Stage| STAGES.iter().position(|s| *s == stage).unwrap();
    let job_id = |frame: usize, stage: Stage| frame * n_stages + stage_pos(stage);
    let total = frames * n_stages;
    let mut start: Vec<Option<f64>> = vec![None; total];
    let mut end: Vec<Option<f64>> = vec![None; total];
    let mut free_at = [0.0f64; 4];
    let res_idx = |r: ResourceId| -> usize {
        match r {
            ResourceId::Camera => 0,
            ResourceId::Accelerator => 1,
            ResourceId::Link => 2,
            ResourceId::Renderer => 3,
        }
    };
    // Jobs of one stage always start in frame order (their readiness is
    // monotone in the frame index), so a per-stage cursor to the first
    // unstarted frame is enough.
    let mut cursor = [0usize; 6];
    // Ready time of a stage's cursor job, if all predecessors have finished.
    let ready_time = |end: &[Option<f64>], cursor: &[usize; 6], stage: Stage| -> Option<f64> {
        let f = cursor[stage_pos(stage)];
        if f >= frames {
            return None;
        }
        preds(f, stage)
            .iter()
            .try_fold(0.0f64, |m, &(pf, ps)| end[job_id(pf, ps)].map(|e| m.max(e)))
    };
    let mut prefer_decode = false;
    let mut t = 0.0f64;
    let mut scheduled = 0usize;
    while scheduled < total {
        // Start jobs greedily at the current instant until nothing fits.
        loop {
            let mut started = false;
            for res in [
                ResourceId::Camera,
                ResourceId::Accelerator,
                ResourceId::Link,
                ResourceId::Renderer,
            ] {
                let r = res_idx(res);
                if free_at[r] > t {
                    continue;
                }
                let ready_now = |stage: Stage| -> bool {
                    ready_time(&end, &cursor, stage).is_some_and(|rdy| rdy <= t)
                };
                let pick: Option<Stage> = match res {
                    ResourceId::Camera => ready_now(Stage::Sensor).then_some(Stage::Sensor),
                    ResourceId::Renderer => ready_now(Stage::Render).then_some(Stage::Render),
                    ResourceId::Link => {
                        // The decode-critical inbound transfer outranks the
                        // outbound one of the same frame; across frames the
                        // older frame goes first.
                        let fi = cursor[stage_pos(Stage::TransmitIn)];
                        let fo = cursor[stage_pos(Stage::TransmitOut)];
                        match (ready_now(Stage::TransmitIn), ready_now(Stage::TransmitOut)) {
                            (true, true) => {
                                Some(if fo < fi { Stage::TransmitOut } else { Stage::TransmitIn })
                            }
                            (true, false) => Some(Stage::TransmitIn),
                            (false, true) => Some(Stage::TransmitOut),
                            (false, false) => None,
                        }
                    }
                    ResourceId::Accelerator => {
                        match (ready_now(Stage::Encode), ready_now(Stage::Decode)) {
                            (true, true) => Some(if prefer_decode {
                                Stage::Decode
                            } else {
                                Stage::Encode
                            }),
                            (true, false) => Some(Stage::Encode),
                            (false, true) => Some(Stage::Decode),
                            (false, false) => None,
                        }
                    }
                };
                if let Some(stage) = pick {
                    let f = cursor[stage_pos(stage)];
                    let id = job_id(f, stage);
                    let dur = duration(stage, lat);
                    start[id] = Some(t);
                    end[id] = Some(t + dur);
                    free_at[r] = t + dur;
                    cursor[stage_pos(stage)] += 1;
                    scheduled += 1;
                    started = true;
                    if res == ResourceId::Accelerator {
                        prefer_decode = stage == Stage::Encode;
                    }
                }
            }
            if !started {
                break;
            }
        }
        if scheduled == total {
            break;
        }
        // Advance to the earliest instant where some cursor job could run.
        let mut next = f64::INFINITY;
        for stage in STAGES {
            if let Some(rdy) = ready_time(&end, &cursor, stage) {
                next = next.min(rdy.max(free_at[res_idx(stage.resource())]));
            }
        }
        debug_assert!(next.is_finite() && next > t, "scheduler stalled at t={t}");
        t = next;
    }
    let jobs = (0..frames)
        .flat_map(|f| STAGES.iter().map(move |s| (f, *s)))
        .map(|(f, s)| ScheduledJob {
            frame: f,
            stage: s,
            start_ms: start[job_id(f, s)].unwrap(),
            end_ms: end[job_id(f, s)].unwrap(),
        })
        .collect();
    Ok(Schedule {
        horizon: frames,
        latencies: *lat,
        jobs,
    })
}

/// Closed-form steady-state frame interval for this resource model.
pub fn steady_state_interval_formula(lat: &StageLatencies) -> f64 {
    lat.sensor_ms
        .max(lat.encode_ms + lat.decode_ms)
        .max(2.0 * lat.transmit_ms)
        .max(lat.render_ms)
}

/// 1000 / median inter-frame render-completion interval over the last half
/// of the horizon. Median rather than mean so warm-up frames cannot skew it.
pub fn steady_state_fps(sched: &Schedule) -> Result<f64> {
    if sched.horizon < 8 {
        return Err(Error::HorizonTooShort {
            frames: sched.horizon,
            min: 8,
        });
    }
    let interval = steady_state_interval(sched)?;
    Ok(1000.0 / interval)
}

/// Median steady-state inter-render interval in milliseconds.
///
/// The chronologically last interval is excluded: the final frame runs with
/// no successor contending for resources, so its spacing is a horizon-edge
/// artifact rather than steady-state behavior.
pub fn steady_state_interval(sched: &Schedule) -> Result<f64> {
    if sched.horizon < 8 {
        return Err(Error::HorizonTooShort {
            frames: sched.horizon,
            min: 8,
        });
    }
    let completions = sched.render_completions();
    let tail = &completions[sched.horizon / 2..];
    let mut intervals: Vec<f64> = tail.windows(2).map(|w| w[1] - w[0]).collect();
    if intervals.len() > 1 {
        intervals.pop();
    }
    intervals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = intervals.len();
    let median = if n % 2 == 1 {
        intervals[n / 2]
    } else {
        0.5 * (intervals[n / 2 - 1] + intervals[n / 2])
    };
    Ok(median)
}

/// Mean steady-state inter-render interval: the tail rate
/// `(last - first) / count` over the second half of the horizon, excluding
/// the final frame (horizon-edge artifact). Work-conserving arbitration can
/// settle into periodic multi-frame patterns; the mean converges to the
/// bottleneck rate with truncation error at most one period over the tail
/// length, where the median picks the majority interval.
pub fn steady_state_mean_interval(sched: &Schedule) -> Result<f64> {
    if sched.horizon < 8 {
        return Err(Error::HorizonTooShort {
            frames: sched.horizon,
            min: 8,
        });
    }
    let completions = sched.render_completions();
    let tail = &completions[sched.horizon / 2..completions.len() - 1];
    Ok((tail[tail.len() - 1] - tail[0]) / (tail.len() - 1) as f64)
}
