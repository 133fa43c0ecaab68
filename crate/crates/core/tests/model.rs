mod common;

use common::{micro_config, random_input, row_of};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tptn_autodiff::{Tape, Tensor, TensorError};
use tptn_core::bvh::Pose;
use tptn_core::features::{ControlLayout, Layout, NormStats};
use tptn_core::model::fk::foot_positions;
use tptn_core::model::{Mode, ModelConfig, SequenceInput, Stage, Tptn};
use tptn_core::rot::{expmap_to_quat, quat_to_expmap, rotate_y, yaw_tilt, Vec3};
use tptn_core::skeleton::Skeleton;

fn tiny() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        d_root: 4,
        ffn: 16,
        foot_hidden: 8,
        n_types: 3,
        ..ModelConfig::default()
    }
}

fn perturb(input: &mut SequenceInput<f64>, row: usize) {
    for t in [&mut input.upper, &mut input.lower, &mut input.controls] {
        let c = t.cols();
        for j in 0..c {
            let v = t.get(row, j);
            t.set(row, j, v + 0.75);
        }
    }
}

#[test]
fn default_size_is_compact() {
    let m = Tptn::<f32>::new(ModelConfig::default(), 1).unwrap();
    let n = m.inference_param_count() as f64;
    assert!((n - 3.5e6).abs() <= 0.15 * 3.5e6, "{n}");
    let h = m.config.d_root;
    assert_eq!(m.cm_param_count(), h * h + h + h * 6 + 6);
    assert_eq!(
        m.param_count(),
        m.inference_param_count() + 2 * m.cm_param_count()
    );
}

#[test]
fn inference_model_has_no_consistency_modules() {
    let m = Tptn::<f64>::new(tiny(), 2).unwrap();
    let deployed = m.without_consistency_modules();
    assert!(!deployed.has_consistency_modules());
    assert_eq!(deployed.param_count(), m.inference_param_count());
    assert!(deployed
        .params
        .iter()
        .all(|(_, p)| !p.name.starts_with("cm_")));
    let input = random_input::<f64>(&m.config, 5, 3);
    assert_eq!(
        m.predict(&input).unwrap(),
        deployed.predict(&input).unwrap()
    );
    let mut tape = Tape::with_params(&deployed.params);
    let x = tape.constant(Tensor::zeros(&[5, 4]));
    assert!(deployed
        .consistency_decode(&mut tape, x, Stage::Shallow)
        .is_err());
    let mut tape = Tape::with_params(&m.params);
    let x = tape.constant(Tensor::zeros(&[5, 4]));
    let y = m.consistency_decode(&mut tape, x, Stage::Deep).unwrap();
    assert_eq!(tape.shape(y), &[5, 6]);
}

#[test]
fn output_shapes() {
    let m = Tptn::<f64>::new(tiny(), 4).unwrap();
    let input = random_input::<f64>(&m.config, 7, 5);
    let p = m.predict(&input).unwrap();
    assert_eq!(p.mean.shape(), &[7, 276]);
    assert_eq!(p.logstd.shape(), &[7, 276]);
    assert_eq!(p.traj_mean.shape(), &[7, 24]);
    assert_eq!(p.traj_logstd.shape(), &[7, 24]);
    assert_eq!(p.contact_logits.shape(), &[7, 4]);
    let bad = SequenceInput {
        upper: Tensor::zeros(&[0, 162]),
        ..input.clone()
    };
    assert!(m.predict(&bad).is_err());
    let long = SequenceInput {
        position_offset: 510,
        ..input
    };
    assert!(m.predict(&long).is_err());
}

#[test]
fn zero_aggregate_gives_unit_std() {
    let mut m = Tptn::<f64>::new(tiny(), 4).unwrap();
    m.zero_aggregate();
    let p = m.predict(&random_input(&m.config, 4, 1)).unwrap();
    assert!(p.mean.data().iter().all(|&v| v == 0.0));
    assert!(p.logstd.data().iter().all(|&v| v.exp() == 1.0));
}

#[test]
fn zero_fusion_is_an_identity_bypass() {
    let mut m = Tptn::<f64>::new(tiny(), 6).unwrap();
    m.zero_fusion();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut tape = Tape::with_params(&m.params);
    let a = tape.constant(common::random_tensor(&mut rng, 5, 16, 1.0));
    let b = tape.constant(common::random_tensor(&mut rng, 5, 16, 1.0));
    let (u, l) = m.fuse(&mut tape, a, b).unwrap();
    assert_eq!(tape.value(u), tape.value(a));
    assert_eq!(tape.value(l), tape.value(b));
    assert_eq!(tape.shape(u), &[5, 16]);
}

#[test]
fn upper_deep_stream_reaches_lower_shallow_parameters() {
    let m = Tptn::<f64>::new(tiny(), 7).unwrap();
    let input = random_input::<f64>(&m.config, 6, 2);
    let mut tape = Tape::with_params(&m.params);
    let [_, _, zd_u, _] = m.streams(&mut tape, &input, &mut Mode::Eval).unwrap();
    let loss = tape.sum(zd_u).unwrap();
    let grads = tape.backward(loss).unwrap();
    let id = m.params.find("arm_s_lower.conv.w").unwrap();
    let g = grads
        .params()
        .get(id)
        .expect("gradient reaches lower stream");
    assert!(g.data().iter().any(|&v| v != 0.0));
}

#[test]
fn future_frames_never_change_past_outputs() {
    let m = Tptn::<f64>::new(tiny(), 8).unwrap();
    let input = random_input::<f64>(&m.config, 40, 3);
    let base = m.predict(&input).unwrap();
    for t in [0, 13, 39] {
        let mut p = input.clone();
        perturb(&mut p, t);
        let out = m.predict(&p).unwrap();
        for r in 0..t {
            assert_eq!(row_of(&out.mean, r), row_of(&base.mean, r));
            assert_eq!(
                row_of(&out.contact_logits, r),
                row_of(&base.contact_logits, r)
            );
            assert_eq!(row_of(&out.traj_mean, r), row_of(&base.traj_mean, r));
        }
        assert_ne!(row_of(&out.mean, t), row_of(&base.mean, t));
    }
}

#[test]
fn receptive_field_matches_trl() {
    let cfg = ModelConfig { lm: 4, ..tiny() };
    let m = Tptn::<f64>::new(cfg, 10).unwrap();
    let trl = m.config.trl();
    assert_eq!(trl, 39);
    let steps = trl + 20;
    let last = steps - 1;
    let input = random_input::<f64>(&m.config, steps, 11);
    let base = m.predict(&input).unwrap();
    let change = |row: usize| {
        let mut p = input.clone();
        perturb(&mut p, row);
        let out = m.predict(&p).unwrap();
        row_of(&out.mean, last)
            .iter()
            .zip(row_of(&base.mean, last))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    };
    for row in 0..=last - trl {
        assert_eq!(change(row), 0.0, "row {row}");
    }
    // Influence through 12 random layers is tiny but exactly nonzero.
    assert!(change(last + 1 - trl) > 0.0);
    assert!(change(last) > 1e-9);
    // Stage window: the shallow stack sees k_s + L(lm−1) frames.
    assert_eq!(m.config.receptive_field(Stage::Shallow), 3 + 6 * 3);
}

#[test]
fn input_gradient_reaches_exactly_trl_rows() {
    // At lm 12 a finite perturbation that far back underflows, the gradient does not.
    for (lm, want) in [(4, 39), (8, 87), (12, 135)] {
        let cfg = ModelConfig {
            lm,
            layers_per_arm: ModelConfig::default().layers_per_arm,
            ..micro_config()
        };
        let m = Tptn::<f64>::new(cfg, lm as u64).unwrap();
        assert_eq!(m.config.trl(), want);
        let steps = want + 5;
        let g = m
            .input_influence(&random_input::<f64>(&m.config, steps, 2), steps - 1)
            .unwrap();
        assert_eq!(g.len(), steps);
        assert!(g[..steps - want].iter().all(|&v| v == 0.0), "lm {lm}");
        assert!(g[steps - want..].iter().all(|&v| v > 0.0), "lm {lm}");
    }
}

#[test]
fn truncated_history_gives_the_same_last_frame() {
    let m = Tptn::<f32>::new(tiny(), 12).unwrap();
    let trl = m.config.trl();
    let steps = trl + 40;
    let full = random_input::<f32>(&m.config, steps, 13);
    let start = steps - trl;
    let cut = |t: &Tensor<f32>| {
        let rows: Vec<Vec<f32>> = (start..steps).map(|r| t.row_slice(r).to_vec()).collect();
        Tensor::from_rows(&rows)
    };
    let window = SequenceInput {
        upper: cut(&full.upper),
        lower: cut(&full.lower),
        controls: cut(&full.controls),
        position_offset: start,
    };
    let a = m.predict(&full).unwrap();
    let b = m.predict(&window).unwrap();
    let d = row_of(&a.mean, steps - 1)
        .iter()
        .zip(row_of(&b.mean, trl - 1))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(d < 1e-5, "{d}");
}

#[test]
fn eval_forward_is_deterministic_and_training_is_seeded() {
    let m = Tptn::<f64>::new(tiny(), 14).unwrap();
    let input = random_input::<f64>(&m.config, 12, 15);
    assert_eq!(m.predict(&input).unwrap(), m.predict(&input).unwrap());
    let run = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::with_params(&m.params);
        let out = m.forward(&mut tape, &input, Mode::Train(&mut rng)).unwrap();
        tape.value(out.mean).clone()
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
    let same_seed = Tptn::<f64>::new(tiny(), 14).unwrap();
    assert_eq!(same_seed.params.iter().count(), m.params.iter().count());
    assert!(same_seed
        .params
        .iter()
        .zip(m.params.iter())
        .all(|(a, b)| a.1.value == b.1.value));
}

fn feature_row_of(skel: &Skeleton, pose: &Pose) -> Vec<f64> {
    let lay = Layout::CANONICAL;
    let mut f = vec![0.0; 276];
    let (_, tilt) = yaw_tilt(&pose.rotations[0]);
    f[4] = tilt[0];
    f[5] = tilt[1];
    for j in 1..skel.len() {
        let e = quat_to_expmap(&pose.rotations[j]);
        f[lay.rot(j)..lay.rot(j) + 3].copy_from_slice(e.as_slice());
    }
    f
}

#[test]
fn fk_layer_matches_skeleton_fk() {
    let skel = Skeleton::canonical();
    let feet = skel.feet.unwrap().as_array();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut rows = Vec::new();
    let mut expect = Vec::new();
    for _ in 0..6 {
        let mut pose = Pose::identity(23, Vec3::new(3.0, 90.0, -2.0));
        for q in pose.rotations.iter_mut() {
            *q = expmap_to_quat(&Vec3::new(
                rng.random_range(-1.2..1.2),
                rng.random_range(-1.2..1.2),
                rng.random_range(-1.2..1.2),
            ));
        }
        let (yaw, _) = yaw_tilt(&pose.rotations[0]);
        let (pos, _) = skel
            .forward_kinematics(&pose.rotations, &pose.root_position)
            .unwrap();
        expect.push(feet.map(|j| rotate_y(-yaw, &(pos[j] - pose.root_position))));
        rows.push(feature_row_of(&skel, &pose));
    }
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_rows(&rows));
    let y = foot_positions(&mut tape, &skel, x).unwrap();
    let out = tape.value(y);
    for (r, e) in expect.iter().enumerate() {
        for (k, p) in e.iter().enumerate() {
            for a in 0..3 {
                assert!((out.get(r, 3 * k + a) - p[a]).abs() < 1e-5);
            }
        }
    }
    // Identity rotations give the rest-pose foot offsets.
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(&[2, 276]));
    let y = foot_positions(&mut tape, &skel, x).unwrap();
    let rest = skel.rest_positions();
    for (k, &j) in feet.iter().enumerate() {
        for a in 0..3 {
            assert!((tape.value(y).get(1, 3 * k + a) - rest[j][a]).abs() < 1e-12);
        }
    }
}

#[test]
fn fk_layer_gradients() {
    let skel = Skeleton::canonical();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x = common::random_tensor::<f64>(&mut rng, 3, 276, 1.0);
    let check = tptn_autodiff::gradcheck::check_gradients(&[x], 1e-5, |tape, v| {
        let y = foot_positions(tape, &skel, v[0])
            .map_err(|e| TensorError::InvalidArgument(e.to_string()))?;
        let w = tape.constant(Tensor::from_vec(
            vec![3, 12],
            (0..36).map(|i| (i as f64 * 0.37).sin()).collect(),
        )?);
        let p = tape.mul(y, w)?;
        tape.sum(p)
    })
    .unwrap();
    assert!(check.max_rel_error < 1e-4, "{check:?}");
}

#[test]
fn micro_model_builds() {
    let m = Tptn::<f64>::new(micro_config(), 1).unwrap();
    let stats = NormStats::identity(ControlLayout::new(2));
    assert_eq!(stats.feature_mean.len(), 276);
    assert!(m.predict(&random_input(&m.config, 3, 1)).is_ok());
}
