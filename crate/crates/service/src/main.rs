use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use tptn_autodiff::Real;
use tptn_core::bvh::{write_bvh, RawClip};
use tptn_core::checkpoint::Checkpoint;
use tptn_core::data::{Dataset, Manifest};
use tptn_core::features::MotionSequence;
use tptn_core::metrics::{evaluate, MetricReport};
use tptn_core::model::ModelConfig;
use tptn_core::synthesis::{
    root_track, trajectory_distance, trajectory_to_controls, SampleMode, Session, SessionConfig,
    Synthesizer, TrajectorySpec, Warmup,
};
use tptn_core::synthetic::{generate_segments, GaitSpec};
use tptn_core::train::{plan, train, RunOutput, Trainer};

use tptn_service::config::{Config, CONFIG_ENV};
use tptn_service::registry::Registry;
use tptn_service::server::Server;
use tptn_service::steering::Steering;

#[derive(Parser)]
#[command(
    name = "tptn",
    version,
    about = "Train, run and serve two-part transformer motion models"
)]
struct Cli {
    /// TOML config file. Defaults to the file named by TPTN_CONFIG, then
    /// built-in defaults.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Tiny,
    Default,
}

#[derive(Subcommand)]
enum Command {
    /// Read the BVH files of a manifest into a normalized dataset cache.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset cache.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Print clip counts, strides and parameter count; train nothing.
        #[arg(long)]
        dry_run: bool,
        #[arg(long)]
        epochs: Option<usize>,
        /// Overrides the [model] section of the config.
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        /// Train in double precision.
        #[arg(long)]
        f64: bool,
    },
    /// Generate motion from a trajectory file or a control script and write BVH.
    Synthesize {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset cache holding the warm-up sequence.
        #[arg(long)]
        warmup_data: PathBuf,
        /// Warm-up sequence name; the first sequence by default.
        #[arg(long)]
        sequence: Option<String>,
        /// JSON trajectory in the character's starting frame (x right, z forward, cm).
        #[arg(long, conflicts_with = "controls")]
        trajectory: Option<PathBuf>,
        /// JSON lines of {"frame", "type_id", "direction_xz", "speed"}; each line
        /// takes effect from its frame on.
        #[arg(long)]
        controls: Option<PathBuf>,
        /// Frames to generate. Defaults to the trajectory duration, else 600.
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        no_ik: bool,
    },
    /// Metrics of a checkpoint free-running on held-out sequences with their recorded controls.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "data", required_unless_present = "data")]
        manifest: Option<PathBuf>,
        /// Dataset cache instead of a manifest.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Score ground truth against itself.
        #[arg(long)]
        reference: bool,
        /// Print the report as JSON instead of a table.
        #[arg(long)]
        json: bool,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        ik: bool,
    },
    /// Run the streaming session service.
    Serve {
        /// Overrides serve.bind.
        #[arg(long)]
        bind: Option<String>,
    },
    /// Write a small labelled synthetic BVH corpus and its manifest.
    GenerateSynthetic {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Sample,
    Mean,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = Config::load(cli.config.as_deref())?;
    match cli.command {
        Command::Ingest { manifest, out } => {
            let (m, dir) = Manifest::load(&manifest)
                .with_context(|| format!("reading {}", manifest.display()))?;
            let ds = Dataset::ingest(&m, &dir)?;
            ds.save(&out)?;
            println!(
                "{} sequences, {} frames, type frames {:?} -> {}",
                ds.sequences.len(),
                ds.total_frames(),
                ds.type_counts(),
                out.display()
            );
        }
        Command::Train {
            data,
            out,
            dry_run,
            epochs,
            preset,
            f64,
        } => {
            let ds = Dataset::load(&data).with_context(|| format!("reading {}", data.display()))?;
            let mut model = match preset {
                Some(Preset::Tiny) => ModelConfig::tiny(ds.n_types()),
                Some(Preset::Default) => ModelConfig::default(),
                None => cfg.model.clone(),
            };
            model.n_types = ds.n_types();
            let mut tc = cfg.train.clone();
            if let Some(e) = epochs {
                tc.epochs = e;
            }
            if dry_run {
                let p = plan(&ds, &model, &tc)?;
                println!(
                    "sequences         {} ({} too short)",
                    p.sequences, p.skipped_sequences
                );
                println!("frames            {}", p.frames);
                println!("clips per epoch   {}", p.clips);
                println!("steps per epoch   {}", p.steps_per_epoch);
                for (k, name) in p.type_names.iter().enumerate() {
                    println!(
                        "type {k:<3} {name:<16} frames {:>8}  stride {:>3}  clip share {:.3}",
                        p.type_frames[k], p.strides[k], p.clip_shares[k]
                    );
                }
                println!(
                    "parameters        {} ({} at inference)",
                    p.parameters, p.inference_parameters
                );
                println!("TRL               {}", p.trl);
                return Ok(());
            }
            if f64 {
                train_at::<f64>(model, tc, &ds, &out)?;
            } else {
                train_at::<f32>(model, tc, &ds, &out)?;
            }
        }
        Command::Synthesize {
            checkpoint,
            warmup_data,
            sequence,
            trajectory,
            controls,
            frames,
            out,
            mode,
            seed,
            no_ik,
        } => {
            let ck = Checkpoint::<f64>::load(&checkpoint)?;
            let synth = Arc::new(Synthesizer::from_checkpoint(ck));
            let ds = Dataset::load(&warmup_data)?;
            let seq = pick(&ds, sequence.as_deref())?;
            let mut sc = cfg.session;
            if let Some(m) = mode {
                sc.mode = match m {
                    Mode::Sample => SampleMode::Sample,
                    Mode::Mean => SampleMode::Mean,
                };
            }
            if let Some(s) = seed {
                sc.seed = s;
            }
            sc.ik &= !no_ik;
            let script = controls.map(|p| read_script(&p)).transpose()?;
            let spec: Option<TrajectorySpec> = trajectory
                .map(|p| -> Result<_> { Ok(serde_json::from_str(&std::fs::read_to_string(&p)?)?) })
                .transpose()?;
            synthesize(&synth, sc, seq, spec, script, frames, &out)?;
        }
        Command::Evaluate {
            checkpoint,
            manifest,
            data,
            reference,
            json,
            warmup,
            ik,
        } => {
            let ck = Checkpoint::<f64>::load(&checkpoint)?;
            let synth = Arc::new(Synthesizer::from_checkpoint(ck));
            let (ds, name) = match (manifest, data) {
                (Some(m), _) => {
                    let (man, dir) = Manifest::load(&m)?;
                    (Dataset::ingest(&man, &dir)?, m)
                }
                (None, Some(d)) => (Dataset::load(&d)?, d),
                (None, None) => bail!("need --manifest or --data"),
            };
            if ds.type_names != synth.type_names {
                bail!(
                    "dataset types {:?} differ from checkpoint types {:?}",
                    ds.type_names,
                    synth.type_names
                );
            }
            let mut ec = cfg.eval;
            ec.reference |= reference;
            ec.ik |= ik;
            if let Some(w) = warmup {
                ec.warmup = w;
            }
            let seqs: Vec<&MotionSequence> = ds.sequences.iter().map(|s| &s.motion).collect();
            let report: MetricReport = evaluate(
                &synth,
                &seqs,
                &ec,
                &checkpoint.display().to_string(),
                &name.display().to_string(),
            )?;
            if json {
                println!("{}", report.to_json()?);
            } else {
                print!("{}", report.to_table());
            }
        }
        Command::Serve { bind } => {
            let mut sc = cfg.serve.clone();
            if let Some(b) = bind {
                sc.bind = b;
            }
            let registry = Arc::new(Registry::load(&sc.checkpoints)?);
            let server = Server::bind(&sc, registry, cfg.session.warmup)?;
            log::info!("listening on {}", server.local_addr()?);
            server.run()?;
        }
        Command::GenerateSynthetic { out } => generate_corpus(&out)?,
    }
    Ok(())
}

fn train_at<T: Real>(
    model: ModelConfig,
    tc: tptn_core::train::TrainConfig,
    ds: &Dataset,
    out: &Path,
) -> Result<()> {
    let mut trainer = Trainer::<T>::new(model, tc, ds)?;
    let run = RunOutput {
        dir: out.to_path_buf(),
    };
    train(
        &mut trainer,
        &run,
        &mut |s| {
            log::debug!(
                "epoch {} step {} loss {:.5} |g| {:.3}",
                s.epoch,
                s.step,
                s.loss.total,
                s.grad_norm
            )
        },
        &mut |e| {
            log::info!(
                "epoch {} lr {:.2e} clips {} loss {:.5} ({:.1} s)",
                e.epoch,
                e.lr,
                e.clips,
                e.loss.total,
                e.seconds
            )
        },
    )?;
    println!("{}", run.final_path().display());
    Ok(())
}

fn pick<'a>(ds: &'a Dataset, name: Option<&str>) -> Result<&'a MotionSequence> {
    match name {
        None => ds
            .sequences
            .first()
            .map(|s| &s.motion)
            .context("dataset is empty"),
        Some(n) => ds
            .sequences
            .iter()
            .map(|s| &s.motion)
            .find(|s| s.name == n)
            .with_context(|| format!("no sequence named {n:?}")),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptLine {
    frame: u64,
    #[serde(default)]
    type_id: Option<usize>,
    #[serde(default)]
    direction_xz: Option<[f64; 2]>,
    #[serde(default)]
    speed: Option<f64>,
}

fn read_script(path: &Path) -> Result<Vec<ScriptLine>> {
    let f = std::fs::File::open(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = Vec::new();
    for (i, l) in BufReader::new(f).lines().enumerate() {
        let l = l?;
        if l.trim().is_empty() {
            continue;
        }
        let s: ScriptLine =
            serde_json::from_str(&l).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        lines.push(s);
    }
    lines.sort_by_key(|s| s.frame);
    Ok(lines)
}

fn synthesize(
    synth: &Arc<Synthesizer<f64>>,
    sc: SessionConfig,
    seq: &MotionSequence,
    spec: Option<TrajectorySpec>,
    script: Option<Vec<ScriptLine>>,
    frames: Option<usize>,
    out: &Path,
) -> Result<()> {
    let warm = Warmup::from_sequence(seq, sc.warmup, synth.n_types())?;
    let mut session = Session::new(synth.clone(), sc, &warm)?;
    let fps = synth.fps;
    let start = session.root();
    let traj = match &spec {
        Some(s) => Some(s.to_world(&start).compile(synth.n_types())?),
        None => None,
    };
    let n = frames.unwrap_or_else(|| {
        traj.as_ref()
            .map_or(600, |t| (t.duration() * fps).ceil() as usize)
    });
    let mut steering = Steering::default();
    let mut script = script.unwrap_or_default().into_iter().peekable();
    let mut poses = Vec::with_capacity(n);
    for k in 0..n as u64 {
        while let Some(line) = script.next_if(|l| l.frame <= k) {
            steering.update(&Steering {
                type_id: line.type_id,
                direction_xz: line.direction_xz,
                speed: line.speed,
            });
        }
        let root = session.root();
        let control = match &traj {
            Some(t) => {
                let shape = session
                    .pending_control()
                    .map(|c| c.shape.clone())
                    .unwrap_or_default();
                Some(trajectory_to_controls(
                    t,
                    &root,
                    k as f64 / fps,
                    fps,
                    &shape,
                ))
            }
            None => session
                .pending_control()
                .and_then(|base| steering.control(base, &root, fps)),
        };
        poses.push(session.step(control.as_ref())?.pose);
    }
    let clip = RawClip::new(synth.skeleton.clone(), poses, 1.0 / fps);
    std::fs::write(out, write_bvh(&clip)).with_context(|| format!("writing {}", out.display()))?;
    println!("{} frames -> {}", clip.len(), out.display());
    if let (Some(spec), Some(_)) = (&spec, &traj) {
        let d = trajectory_distance(&root_track(&clip.frames), &spec.to_world(&start).polyline())?;
        println!("trajectory distance {d:.3} cm/frame");
    }
    Ok(())
}

/// Idle, walk and run clips with type labels, enough for a smoke-test
/// training run.
fn generate_corpus(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let fps = 60.0;
    let idle = GaitSpec::idle();
    let walk = GaitSpec::walk(130.0);
    let run = GaitSpec {
        cycle: 0.6,
        stance: 0.4,
        step_height: 14.0,
        arm_swing: 0.6,
        ..GaitSpec::walk(350.0)
    };
    let turn = GaitSpec {
        turn_rate: 0.6,
        ..walk
    };
    let clips: Vec<(&str, Vec<(GaitSpec, usize, usize)>)> = vec![
        (
            "idle_walk",
            vec![(idle, 240, 0), (walk, 600, 1), (idle, 240, 0)],
        ),
        (
            "walk_turn",
            vec![(walk, 300, 1), (turn, 400, 1), (walk, 300, 1)],
        ),
        (
            "walk_run",
            vec![(walk, 300, 1), (run, 500, 2), (walk, 300, 1)],
        ),
    ];
    let mut entries = Vec::new();
    for (name, segs) in &clips {
        let (clip, _) = generate_segments(segs, 3, fps);
        let file = format!("{name}.bvh");
        std::fs::write(out.join(&file), write_bvh(&clip))?;
        let mut at = 0;
        let labels: Vec<_> = segs
            .iter()
            .map(|&(_, n, ty)| {
                let span = serde_json::json!({"start": at, "end": at + n, "type": ty});
                at += n;
                span
            })
            .collect();
        entries.push(serde_json::json!({"path": file, "performer": "synthetic", "labels": labels, "mirror": true}));
    }
    let manifest = serde_json::json!({
        "type_names": ["idle", "walk", "run"],
        "target_fps": fps,
        "sequences": entries,
    });
    std::fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    println!(
        "{} clips -> {}",
        clips.len(),
        out.join("manifest.json").display()
    );
    Ok(())
}
