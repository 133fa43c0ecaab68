//! Differentiable forward kinematics from predicted features to the foot
//! joints, expressed in the yaw-aligned root frame.

use tptn_autodiff::{lit, Real, Tape, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::features::{Layout, NormStats};
use crate::skeleton::Skeleton;

/// `z · std + mean` for a T×F normalized feature sequence.
pub fn denormalize<T: Real>(tape: &mut Tape<'_, T>, z: Var, stats: &NormStats) -> Result<Var> {
    let row = |v: &[f64]| Tensor::row(v.iter().map(|&x| lit(x)).collect());
    let std = tape.constant(row(&stats.feature_std));
    let mean = tape.constant(row(&stats.feature_mean));
    let x = tape.mul(z, std)?;
    Ok(tape.add(x, mean)?)
}

fn repeat_rows<T: Real>(v: [f64; 3], rows: usize) -> Tensor<T> {
    let data = (0..rows).flat_map(|_| v.map(lit::<T>)).collect();
    Tensor::from_vec(vec![rows, 3], data).expect("sized")
}

/// Positions (T×12: left foot, left toe, right foot, right toe) computed
/// from the tilt and joint exp-maps of a denormalized feature sequence.
pub fn foot_positions<T: Real>(
    tape: &mut Tape<'_, T>,
    skel: &Skeleton,
    features: Var,
) -> Result<Var> {
    let feet = skel
        .feet
        .ok_or_else(|| CoreError::Skeleton("foot joints not found".into()))?
        .as_array();
    let lay = Layout { joints: skel.len() };
    let steps = tape.value(features).rows();
    let tilt = tape.slice(features, 1, 4, 2)?;
    let tx = tape.slice(tilt, 1, 0, 1)?;
    let tz = tape.slice(tilt, 1, 1, 1)?;
    let zero = tape.constant(Tensor::zeros(&[steps, 1]));
    let root_axis = tape.concat(&[tx, zero, tz], 1)?;
    let root_rot = tape.expmap_to_mat3(root_axis)?;

    // World rotation and root-relative position per joint, filled lazily.
    let mut rot: Vec<Option<Var>> = vec![None; skel.len()];
    let mut pos: Vec<Option<Var>> = vec![None; skel.len()];
    let root = skel
        .parents
        .iter()
        .position(Option::is_none)
        .expect("validated skeleton has a root");
    rot[root] = Some(root_rot);

    fn visit<T: Real>(
        tape: &mut Tape<'_, T>,
        skel: &Skeleton,
        lay: Layout,
        features: Var,
        steps: usize,
        j: usize,
        rot: &mut [Option<Var>],
        pos: &mut [Option<Var>],
    ) -> Result<()> {
        if rot[j].is_some() && (pos[j].is_some() || skel.parents[j].is_none()) {
            return Ok(());
        }
        let p = skel.parents[j].expect("non-root joint");
        visit(tape, skel, lay, features, steps, p, rot, pos)?;
        let parent_rot = rot[p].expect("visited");
        let off = skel.offsets[j];
        let off = tape.constant(repeat_rows([off.x, off.y, off.z], steps));
        let step = tape.mat3_vec(parent_rot, off)?;
        pos[j] = Some(match pos[p] {
            Some(pp) => tape.add(pp, step)?,
            None => step,
        });
        let e = tape.slice(features, 1, lay.rot(j), 3)?;
        let local = tape.expmap_to_mat3(e)?;
        rot[j] = Some(tape.mat3_mul(parent_rot, local)?);
        Ok(())
    }

    let mut cols = Vec::with_capacity(4);
    for &j in &feet {
        visit(tape, skel, lay, features, steps, j, &mut rot, &mut pos)?;
        cols.push(pos[j].expect("visited"));
    }
    Ok(tape.concat(&cols, 1)?)
}
