#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tptn_autodiff::{lit, Real, Tensor};
use tptn_core::model::{ModelConfig, SequenceInput};

pub fn random_tensor<T: Real>(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    scale: f64,
) -> Tensor<T> {
    let data = (0..rows * cols)
        .map(|_| lit(rng.random_range(-scale..scale)))
        .collect();
    Tensor::from_vec(vec![rows, cols], data).unwrap()
}

pub fn random_input<T: Real>(cfg: &ModelConfig, steps: usize, seed: u64) -> SequenceInput<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SequenceInput {
        upper: random_tensor(&mut rng, steps, cfg.upper_dim(), 1.0),
        lower: random_tensor(&mut rng, steps, cfg.lower_dim(), 1.0),
        controls: random_tensor(&mut rng, steps, cfg.control_layout().dim(), 1.0),
        position_offset: 0,
    }
}

/// Smallest config that still has every component.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        layers_per_arm: 1,
        lm: 2,
        d_root: 3,
        ffn: 8,
        foot_hidden: 4,
        n_types: 2,
        ..ModelConfig::default()
    }
}

pub fn row_of<T: Real>(t: &Tensor<T>, r: usize) -> Vec<f64> {
    t.row_slice(r).iter().map(|v| v.to_f64_lossy()).collect()
}

pub fn walk_dataset(frames: usize) -> tptn_core::data::Dataset {
    use tptn_core::synthetic::{generate_segments, GaitSpec};
    let (clip, types) = generate_segments(
        &[
            (GaitSpec::idle(), frames / 3, 0),
            (GaitSpec::walk(120.0), frames - frames / 3, 1),
        ],
        2,
        60.0,
    );
    let seq = tptn_core::data::Dataset::convert(
        "walk".into(),
        "p",
        &clip,
        &types,
        &tptn_core::features::ContactThresholds::default(),
    )
    .unwrap();
    tptn_core::data::Dataset::from_sequences(vec!["idle".into(), "walk".into()], 60.0, vec![seq])
        .unwrap()
}

pub fn synthesizer<T: Real>(
    cfg: ModelConfig,
    ds: &tptn_core::data::Dataset,
    seed: u64,
) -> tptn_core::synthesis::Synthesizer<T> {
    tptn_core::synthesis::Synthesizer {
        model: tptn_core::model::Tptn::new(cfg, seed).unwrap(),
        stats: ds.stats.clone(),
        skeleton: ds.sequences[0].skeleton.clone(),
        type_names: ds.type_names.clone(),
        fps: 60.0,
    }
}
