mod common;

use std::sync::Arc;

use common::{micro_config, synthesizer, walk_dataset};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tptn_autodiff::Tensor;
use tptn_core::features::{split_parts, ControlLayout, ControlRecord, RootState};
use tptn_core::model::SequenceInput;
use tptn_core::rot::{rotate_y, Vec3};
use tptn_core::synthesis::{
    point_segment_distance, sample_gaussian, trajectory_distance, trajectory_to_controls,
    Positions, SampleMode, Session, SessionConfig, Synthesizer, TrajectoryPart, TrajectorySpec,
    Warmup,
};

fn setup(seed: u64) -> (Arc<Synthesizer<f64>>, tptn_core::data::Dataset) {
    let ds = walk_dataset(240);
    let s = synthesizer::<f64>(micro_config(), &ds, seed);
    (Arc::new(s), ds)
}

fn session(
    synth: &Arc<Synthesizer<f64>>,
    ds: &tptn_core::data::Dataset,
    cfg: SessionConfig,
) -> Session<f64> {
    let w = Warmup::from_sequence(&ds.sequences[0].motion, cfg.warmup, 2).unwrap();
    Session::new(synth.clone(), cfg, &w).unwrap()
}

fn mean_cfg() -> SessionConfig {
    SessionConfig {
        mode: SampleMode::Mean,
        ik: false,
        warmup: 10,
        ..SessionConfig::default()
    }
}

#[test]
fn floor_sigma_keeps_samples_at_the_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mean: Vec<f64> = (0..276).map(|i| i as f64 * 0.01 - 1.0).collect();
    let logstd = vec![-40.0; 276];
    for _ in 0..100 {
        let x = sample_gaussian(&mean, &logstd, &mut rng);
        assert!(x.iter().zip(&mean).all(|(a, b)| (a - b).abs() < 1e-3));
    }
}

#[test]
fn sample_statistics_match_the_density() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mean = [0.5, -2.0, 3.0, 0.0];
    let logstd = [0.0, -1.0, 0.7, -3.0];
    let n = 10_000;
    let draws: Vec<Vec<f64>> = (0..n)
        .map(|_| sample_gaussian(&mean, &logstd, &mut rng))
        .collect();
    for d in 0..4 {
        let s: f64 = logstd[d].exp();
        let m = draws.iter().map(|x| x[d]).sum::<f64>() / n as f64;
        let v = draws.iter().map(|x| (x[d] - m).powi(2)).sum::<f64>() / n as f64;
        assert!((m - mean[d]).abs() < 0.03 * s, "dim {d}: mean {m}");
        assert!(
            (v.sqrt() / s - 1.0).abs() < 0.03,
            "dim {d}: std {}",
            v.sqrt()
        );
    }
}

#[test]
fn mean_mode_is_deterministic_and_sample_mode_follows_the_seed() {
    let (synth, ds) = setup(1);
    let run = |cfg: SessionConfig| {
        let mut s = session(&synth, &ds, cfg);
        (0..20)
            .map(|_| s.step(None).unwrap().features)
            .collect::<Vec<_>>()
    };
    assert_eq!(run(mean_cfg()), run(mean_cfg()));
    let sample = |seed| SessionConfig {
        mode: SampleMode::Sample,
        seed,
        ..mean_cfg()
    };
    assert_eq!(run(sample(4)), run(sample(4)));
    assert_ne!(run(sample(4)), run(sample(5)));
    assert_ne!(run(sample(4)), run(mean_cfg()));
}

#[test]
fn buffer_never_exceeds_trl_and_indices_advance() {
    let (synth, ds) = setup(2);
    let trl = synth.trl();
    let mut s = session(&synth, &ds, mean_cfg());
    assert_eq!(s.buffered(), trl.min(10));
    for k in 0..trl + 15 {
        let f = s.step(None).unwrap();
        assert_eq!(f.index, 10 + k as u64);
        assert!(s.buffered() <= trl);
    }
    assert_eq!(s.buffered(), trl);
}

#[test]
fn root_integrates_the_velocity_blocks_exactly() {
    let (synth, ds) = setup(3);
    let mut s = session(
        &synth,
        &ds,
        SessionConfig {
            mode: SampleMode::Sample,
            ..mean_cfg()
        },
    );
    let start = s.root();
    let (mut x, mut z, mut yaw) = (start.position.x, start.position.z, start.yaw);
    for _ in 0..50 {
        let f = s.step(None).unwrap();
        let d = rotate_y(yaw, &Vec3::new(f.features[1], 0.0, f.features[2]));
        x += d.x;
        z += d.z;
        yaw += f.features[0];
        assert_eq!(f.root.position.x, x);
        assert_eq!(f.root.position.z, z);
        assert_eq!(f.root.position.y, f.features[3]);
        assert_eq!(f.root.yaw, yaw);
        assert_eq!(f.pose.root_position, f.root.position);
    }
}

#[test]
fn buffered_window_matches_full_history() {
    let (synth, ds) = setup(4);
    let cfg = SessionConfig {
        positions: Positions::Absolute,
        ..mean_cfg()
    };
    let mut s = session(&synth, &ds, cfg);
    let seq = &ds.sequences[0].motion;
    let layout = ControlLayout::new(2);
    let mut features: Vec<Vec<f64>> = seq.features[..10].to_vec();
    let mut contacts: Vec<[f64; 4]> = seq.contacts[..10].to_vec();
    let mut controls: Vec<ControlRecord> = seq.controls[..10]
        .iter()
        .map(|c| ControlRecord::from_vec(c, layout).unwrap())
        .collect();
    let steps = synth.trl() + 30;
    let mut last = None;
    for k in 0..steps {
        let f = s.step(None).unwrap();
        // The control the step used belongs to the newest history row.
        *controls.last_mut().unwrap() = f.control.clone();
        if k + 1 == steps {
            last = Some(f);
            break;
        }
        features.push(f.features.clone());
        contacts.push(f.contacts);
        controls.push(s.pending_control().unwrap().clone());
    }
    let st = &synth.stats;
    let scheme = &synth.model.config.partition;
    let (mut up, mut lo, mut co) = (Vec::new(), Vec::new(), Vec::new());
    for ((f, c), ctl) in features.iter().zip(&contacts).zip(&controls) {
        let (u, l) = split_parts(&st.normalize_features(f), c, scheme);
        up.extend(u);
        lo.extend(l);
        co.extend(st.normalize_controls(&ctl.to_vec()));
    }
    let n = features.len();
    let input = SequenceInput {
        upper: Tensor::from_vec(vec![n, up.len() / n], up).unwrap(),
        lower: Tensor::from_vec(vec![n, lo.len() / n], lo).unwrap(),
        controls: Tensor::from_vec(vec![n, co.len() / n], co).unwrap(),
        position_offset: 0,
    };
    let full = synth.model.predict(&input).unwrap();
    let want = full.mean.row_slice(n - 1);
    let got = &last.unwrap().mean;
    let err = got
        .iter()
        .zip(want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-5, "max deviation {err}");
}

#[test]
fn user_control_is_used_and_fallback_is_the_prediction() {
    let (synth, ds) = setup(5);
    let mut s = session(&synth, &ds, mean_cfg());
    let f0 = s.step(None).unwrap();
    assert_eq!(f0.source, tptn_core::synthesis::ControlSource::Warmup);
    let f1 = s.step(None).unwrap();
    assert_eq!(f1.source, tptn_core::synthesis::ControlSource::Predicted);
    for d in f1.control.directions {
        assert!((d[0].hypot(d[1]) - 1.0).abs() < 1e-9);
    }
    let mut c = s.pending_control().unwrap().clone();
    c.positions = [[0.0, 50.0]; 6];
    let f2 = s.step(Some(&c)).unwrap();
    assert_eq!(f2.source, tptn_core::synthesis::ControlSource::User);
    assert_eq!(f2.control, c);
    let mut bad = c.clone();
    bad.types = vec![vec![1.0]; 6];
    assert!(s.step(Some(&bad)).is_err());
}

#[test]
fn non_finite_prediction_fails_the_session() {
    let (synth, ds) = setup(6);
    let mut broken = (*synth).clone();
    for (_, p) in broken.model.params.iter_mut() {
        p.value.data_mut()[0] = f64::NAN;
    }
    let mut s = session(&Arc::new(broken), &ds, mean_cfg());
    assert!(s.step(None).is_err());
    assert!(s.is_failed());
    assert!(s.step(None).is_err());
}

#[test]
fn warmup_must_not_be_empty() {
    let (synth, ds) = setup(7);
    let mut w = Warmup::from_sequence(&ds.sequences[0].motion, 5, 2).unwrap();
    w.features.clear();
    assert!(Session::new(synth, mean_cfg(), &w).is_err());
}

fn origin() -> RootState {
    RootState {
        position: Vec3::zeros(),
        yaw: 0.0,
    }
}

#[test]
fn straight_line_controls() {
    let spec = TrajectorySpec::line([0.0, 0.0], [0.0, 2000.0], 1.0, 1, 600.0);
    let traj = spec.compile(2).unwrap();
    let c = trajectory_to_controls(&traj, &origin(), 0.0, 60.0, &[]);
    for k in 0..6 {
        assert!((c.positions[k][0]).abs() < 1e-9);
        assert!((c.positions[k][1] - 100.0 * (k + 1) as f64).abs() < 1e-9);
        assert_eq!(c.directions[k], [0.0, 1.0]);
        assert_eq!(c.types[k], vec![0.0, 1.0]);
    }
    // Same path seen from a character turned a quarter to the left and
    // displaced: controls are expressed in its root frame.
    let root = RootState {
        position: Vec3::new(0.0, 90.0, 100.0),
        yaw: std::f64::consts::FRAC_PI_2,
    };
    let c = trajectory_to_controls(&traj, &root, 0.0, 60.0, &[]);
    let d = c.directions[0];
    assert!((d[0] + 1.0).abs() < 1e-9 && d[1].abs() < 1e-9, "{d:?}");
    assert!((c.positions[0][0] - 0.0).abs() < 1e-9);
}

#[test]
fn circle_tangents_are_orthogonal_to_radii() {
    let r = 300.0;
    let n = 20_000;
    let points: Vec<[f64; 2]> = (0..=n)
        .map(|i| {
            let a = i as f64 / n as f64 * std::f64::consts::TAU;
            [r * a.cos(), r * a.sin()]
        })
        .collect();
    let spec = TrajectorySpec {
        parts: vec![TrajectoryPart {
            points,
            type_id: 0,
            speed: 150.0,
        }],
        end_type: None,
    };
    let traj = spec.compile(1).unwrap();
    for step in 0..200 {
        let t = step as f64 * 0.05;
        let c = trajectory_to_controls(&traj, &origin(), t, 60.0, &[]);
        for k in 0..6 {
            let (p, d) = (c.positions[k], c.directions[k]);
            let dot = (p[0] * d[0] + p[1] * d[1]) / r;
            assert!(dot.abs() < 1e-3, "t {t} k {k}: {dot}");
            assert!((p[0].hypot(p[1]) - r).abs() < 1e-2);
        }
    }
}

#[test]
fn type_cross_fade_is_linear_around_boundaries() {
    // Two parts of one second each at 60 cm/s: the boundary is at frame 60.
    let spec = TrajectorySpec {
        parts: vec![
            TrajectoryPart {
                points: vec![[0.0, 0.0], [0.0, 60.0]],
                type_id: 0,
                speed: 60.0,
            },
            TrajectoryPart {
                points: vec![[0.0, 60.0], [0.0, 120.0]],
                type_id: 2,
                speed: 60.0,
            },
        ],
        end_type: Some(1),
    };
    let traj = spec.compile(3).unwrap();
    // Frame 20 of the 40-frame transition sits on the boundary.
    assert_eq!(traj.type_weights(60.0, 60.0), vec![0.5, 0.0, 0.5]);
    assert_eq!(traj.type_weights(40.0, 60.0), vec![1.0, 0.0, 0.0]);
    assert_eq!(traj.type_weights(50.0, 60.0), vec![0.75, 0.0, 0.25]);
    assert_eq!(traj.type_weights(80.0, 60.0), vec![0.0, 0.0, 1.0]);
    assert_eq!(traj.type_weights(120.0, 60.0), vec![0.0, 0.5, 0.5]);
    assert_eq!(traj.type_weights(500.0, 60.0), vec![0.0, 1.0, 0.0]);
    for f in 0..200 {
        let s: f64 = traj.type_weights(f as f64, 60.0).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    // Beyond the end the last point is held.
    let c = trajectory_to_controls(&traj, &origin(), 10.0, 60.0, &[]);
    assert!(c.positions.iter().all(|p| p == &[0.0, 120.0]));
}

#[test]
fn invalid_trajectories_are_rejected() {
    let ok = TrajectorySpec::line([0.0, 0.0], [0.0, 10.0], 1.0, 0, 100.0);
    assert!(ok.compile(1).is_ok());
    assert!(ok.compile(0).is_err());
    let mut slow = ok.clone();
    slow.parts[0].speed = 0.0;
    assert!(slow.compile(1).is_err());
    let mut gap = ok.clone();
    gap.parts.push(TrajectoryPart {
        points: vec![[5.0, 10.0], [5.0, 20.0]],
        type_id: 0,
        speed: 100.0,
    });
    assert!(gap.compile(1).is_err());
    assert!(TrajectorySpec {
        parts: vec![],
        end_type: None
    }
    .compile(1)
    .is_err());
}

#[test]
fn trajectory_distance_examples() {
    let line = [[0.0, 0.0], [0.0, 100.0], [100.0, 100.0]];
    let on: Vec<[f64; 2]> = (0..50).map(|i| [0.0, i as f64 * 2.0]).collect();
    assert!(trajectory_distance(&on, &line).unwrap() < 1e-12);
    let off: Vec<[f64; 2]> = (0..40).map(|i| [5.0, i as f64 * 2.0]).collect();
    assert!((trajectory_distance(&off, &line).unwrap() - 5.0).abs() < 1e-12);
    assert!(trajectory_distance(&on, &[]).is_err());
    assert!(trajectory_distance(&[], &line).is_err());
    assert_eq!(
        trajectory_distance(&[[3.0, 4.0]], &[[0.0, 0.0]]).unwrap(),
        5.0
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn trajectory_distance_matches_dense_sampling(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let poly: Vec<[f64; 2]> = (0..5).map(|_| [rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0)]).collect();
        let track: Vec<[f64; 2]> = (0..8).map(|_| [rng.random_range(-150.0..150.0), rng.random_range(-150.0..150.0)]).collect();
        // Brute force: closest of many samples on each segment, refined by
        // a local ternary search.
        let brute = |p: [f64; 2]| {
            let mut best = f64::INFINITY;
            for w in poly.windows(2) {
                let d = |u: f64| (p[0] - w[0][0] - u * (w[1][0] - w[0][0])).hypot(p[1] - w[0][1] - u * (w[1][1] - w[0][1]));
                let n = 2000;
                let k = (0..=n).min_by(|&a, &b| d(a as f64 / n as f64).total_cmp(&d(b as f64 / n as f64))).unwrap();
                let (mut lo, mut hi) = (((k as f64 - 1.0) / n as f64).max(0.0), ((k as f64 + 1.0) / n as f64).min(1.0));
                for _ in 0..100 {
                    let (m1, m2) = (lo + (hi - lo) / 3.0, hi - (hi - lo) / 3.0);
                    if d(m1) < d(m2) { hi = m2 } else { lo = m1 }
                }
                best = best.min(d((lo + hi) / 2.0));
            }
            best
        };
        let want = track.iter().map(|&p| brute(p)).sum::<f64>() / track.len() as f64;
        let got = trajectory_distance(&track, &poly).unwrap();
        prop_assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        prop_assert!(point_segment_distance(track[0], poly[0], poly[0]) >= 0.0);
    }
}
