//! Transport-independent state machine of one client connection.

use std::sync::Arc;
use std::time::{Duration, Instant};

use tptn_core::synthesis::{Session, SessionConfig, Trajectory, Warmup};

use crate::protocol::{ClientMessage, ServerMessage, WireFrame, WireSkeleton};
use crate::registry::{Model, Precision, Registry};
use crate::steering::Steering;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamConfig {
    pub batch: usize,
    pub realtime: bool,
    pub metrics_every: u64,
    pub warmup: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            batch: 10,
            realtime: true,
            metrics_every: 60,
            warmup: SessionConfig::default().warmup,
        }
    }
}

struct Run {
    session: Session<Precision>,
    steering: Steering,
    trajectory: Option<(Trajectory, u64)>,
    first_index: u64,
    next_due: Instant,
    sent: u64,
    since_metrics: u64,
    compute: Duration,
    last_batch: Duration,
    late: Duration,
}

pub struct Worker {
    registry: Arc<Registry>,
    cfg: StreamConfig,
    model: Option<Arc<Model>>,
    run: Option<Run>,
}

impl Worker {
    pub fn new(registry: Arc<Registry>, cfg: StreamConfig) -> Self {
        Self {
            registry,
            cfg,
            model: None,
            run: None,
        }
    }

    pub fn is_streaming(&self) -> bool {
        self.run.is_some()
    }

    /// When the next batch is due, if streaming.
    pub fn next_due(&self) -> Option<Instant> {
        self.run.as_ref().map(|r| r.next_due)
    }

    /// Answer one client line. Malformed input yields an error record and
    /// leaves the session as it was.
    pub fn handle_line(&mut self, line: &str, now: Instant) -> Vec<ServerMessage> {
        match serde_json::from_str::<ClientMessage>(line) {
            Ok(m) => self.handle(m, now),
            Err(e) => vec![ServerMessage::error("bad_request", e.to_string())],
        }
    }

    pub fn handle(&mut self, msg: ClientMessage, now: Instant) -> Vec<ServerMessage> {
        let ack = |request: &str, frame: u64| ServerMessage::Ack {
            request: request.into(),
            frame,
        };
        match msg {
            ClientMessage::Hello { checkpoint_id } => match self.registry.get(&checkpoint_id) {
                Some(m) => {
                    self.run = None;
                    let ready = ServerMessage::Ready {
                        skeleton: WireSkeleton::from(&m.synth.skeleton),
                        type_names: m.synth.type_names.clone(),
                        trl: m.synth.trl(),
                        fps: m.synth.fps,
                        warmup_sources: m.warmups.iter().map(|s| s.name.clone()).collect(),
                    };
                    self.model = Some(m);
                    vec![ready]
                }
                None => {
                    let known: Vec<&str> = self.registry.ids().collect();
                    vec![ServerMessage::error(
                        "unknown_checkpoint",
                        format!("no checkpoint {checkpoint_id:?}; known: {known:?}"),
                    )]
                }
            },
            ClientMessage::Start {
                warmup_source,
                mode,
                ik,
                seed,
            } => {
                let Some(model) = self.model.clone() else {
                    return vec![ServerMessage::error("no_checkpoint", "send hello first")];
                };
                let Some(seq) = model.warmup(warmup_source.as_deref()) else {
                    return vec![ServerMessage::error(
                        "unknown_warmup",
                        format!("no warm-up sequence {warmup_source:?}"),
                    )];
                };
                let cfg = SessionConfig {
                    mode,
                    ik,
                    seed,
                    warmup: self.cfg.warmup,
                    ..SessionConfig::default()
                };
                let session = Warmup::from_sequence(seq, cfg.warmup, model.synth.n_types())
                    .and_then(|w| Session::new(model.synth.clone(), cfg, &w));
                match session {
                    Ok(session) => {
                        let first = session.frames();
                        self.run = Some(Run {
                            session,
                            steering: Steering::default(),
                            trajectory: None,
                            first_index: first,
                            next_due: now,
                            sent: 0,
                            since_metrics: 0,
                            compute: Duration::ZERO,
                            last_batch: Duration::ZERO,
                            late: Duration::ZERO,
                        });
                        vec![ack("start", first)]
                    }
                    Err(e) => vec![ServerMessage::error("bad_start", e.to_string())],
                }
            }
            ClientMessage::Control {
                type_id,
                direction_xz,
                speed,
            } => {
                let Some(run) = &mut self.run else {
                    return vec![ServerMessage::error("no_session", "send start first")];
                };
                let n_types = run.session.synthesizer().n_types();
                if type_id.is_some_and(|k| k >= n_types) {
                    return vec![ServerMessage::error(
                        "bad_request",
                        format!("type_id outside 0..{n_types}"),
                    )];
                }
                if speed.is_some_and(|s| !s.is_finite() || s < 0.0)
                    || direction_xz.is_some_and(|d| !d[0].is_finite() || !d[1].is_finite())
                {
                    return vec![ServerMessage::error(
                        "bad_request",
                        "direction and speed must be finite, speed non-negative",
                    )];
                }
                run.steering.update(&Steering {
                    type_id,
                    direction_xz,
                    speed,
                });
                run.trajectory = None;
                vec![ack("control", run.session.frames())]
            }
            ClientMessage::Trajectory { spec } => {
                let Some(run) = &mut self.run else {
                    return vec![ServerMessage::error("no_session", "send start first")];
                };
                match spec.compile(run.session.synthesizer().n_types()) {
                    Ok(t) => {
                        run.trajectory = Some((t, run.session.frames()));
                        vec![ack("trajectory", run.session.frames())]
                    }
                    Err(e) => vec![ServerMessage::error("invalid_trajectory", e.to_string())],
                }
            }
            ClientMessage::Stop => match self.run.take() {
                Some(run) => vec![ack("stop", run.session.frames())],
                None => vec![ServerMessage::error("no_session", "nothing to stop")],
            },
        }
    }

    /// Generate the due batch, if any.
    pub fn tick(&mut self, now: Instant) -> Vec<ServerMessage> {
        let cfg = self.cfg;
        let Some(run) = &mut self.run else {
            return Vec::new();
        };
        if cfg.realtime && now < run.next_due {
            return Vec::new();
        }
        let fps = run.session.synthesizer().fps;
        let t0 = Instant::now();
        let mut batch = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            match step(run, fps) {
                Ok(f) => batch.push(f),
                Err(e) => {
                    self.run = None;
                    let mut out = Vec::new();
                    if !batch.is_empty() {
                        out.push(ServerMessage::Frames { batch });
                    }
                    out.push(ServerMessage::error("synthesis_failed", e.to_string()));
                    return out;
                }
            }
        }
        let took = t0.elapsed();
        run.compute += took;
        run.last_batch = took;
        run.late = now.saturating_duration_since(run.next_due);
        // Late batches keep their schedule so the stream catches up.
        run.next_due += Duration::from_secs_f64(cfg.batch as f64 / fps);
        run.sent += batch.len() as u64;
        run.since_metrics += batch.len() as u64;
        let mut out = vec![ServerMessage::Frames { batch }];
        if run.since_metrics >= cfg.metrics_every {
            run.since_metrics = 0;
            out.push(ServerMessage::Metrics {
                fps: run.sent as f64 / run.compute.as_secs_f64().max(1e-9),
                latency_ms: (cfg.batch as f64 / fps + run.last_batch.as_secs_f64()) * 1e3,
                late_ms: run.late.as_secs_f64() * 1e3,
                frames: run.sent,
            });
        }
        out
    }
}

fn step(run: &mut Run, fps: f64) -> tptn_core::Result<WireFrame> {
    let s = &mut run.session;
    let control = match &run.trajectory {
        Some((traj, start)) => {
            let t = (s.frames() - start) as f64 / fps;
            let shape = s
                .pending_control()
                .map(|c| c.shape.clone())
                .unwrap_or_default();
            Some(tptn_core::synthesis::trajectory_to_controls(
                traj,
                &s.root(),
                t,
                fps,
                &shape,
            ))
        }
        None => s
            .pending_control()
            .and_then(|base| run.steering.control(base, &s.root(), fps)),
    };
    let f = s.step(control.as_ref())?;
    let t = (f.index - run.first_index) as f64 / fps;
    Ok(WireFrame::new(f.index, t, &f.pose, f.contacts))
}
