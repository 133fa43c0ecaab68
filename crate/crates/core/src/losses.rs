//! Training objective: Gaussian likelihood plus smoothness, foot-contact,
//! FK, consistency and trajectory terms.

use serde::{Deserialize, Serialize};
use tptn_autodiff::{lit, Norm, Real, Tape, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::features::{NormStats, ROOT_DIM};
use crate::model::fk::{denormalize, foot_positions};
use crate::model::{ForwardOutput, Stage, Tptn};
use crate::skeleton::Skeleton;

/// Lower bound on the predicted standard deviation.
pub const STD_CLAMP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub smooth: f64,
    pub contact: f64,
    pub fk: f64,
    pub consistency: f64,
    pub trajectory: f64,
    /// Let the sticking term's gradient flow into the contact head. Off by
    /// default: the cheapest way to reduce sticking is then to predict no
    /// contact at all.
    pub sticking_gate_grad: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            smooth: 10.0,
            contact: 5.0,
            fk: 5.0,
            consistency: 1.0,
            trajectory: 1.0,
            sticking_gate_grad: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [
            self.smooth,
            self.contact,
            self.fk,
            self.consistency,
            self.trajectory,
        ];
        if w.iter().any(|v| !(*v >= 0.0)) {
            return Err(CoreError::Config(format!(
                "loss weights must be non-negative, got {w:?}"
            )));
        }
        Ok(())
    }
}

/// Per-term values of one objective evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub gaussian: f64,
    pub smooth: f64,
    pub contact: f64,
    pub fk: f64,
    pub fk_position: f64,
    pub fk_sticking: f64,
    pub consistency: f64,
    pub feat: f64,
    pub root: f64,
    pub trajectory: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Weighted sum of the six terms.
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        self.gaussian
            + w.smooth * self.smooth
            + w.contact * self.contact
            + w.fk * self.fk
            + w.consistency * self.consistency
            + w.trajectory * self.trajectory
    }

    /// Elementwise `self += other * s`.
    pub fn accumulate(&mut self, other: &LossBreakdown, s: f64) {
        let pairs = [
            (&mut self.gaussian, other.gaussian),
            (&mut self.smooth, other.smooth),
            (&mut self.contact, other.contact),
            (&mut self.fk, other.fk),
            (&mut self.fk_position, other.fk_position),
            (&mut self.fk_sticking, other.fk_sticking),
            (&mut self.consistency, other.consistency),
            (&mut self.feat, other.feat),
            (&mut self.root, other.root),
            (&mut self.trajectory, other.trajectory),
            (&mut self.total, other.total),
        ];
        for (a, b) in pairs {
            *a += b * s;
        }
    }
}

/// Ground truth aligned with the model output rows.
#[derive(Debug, Clone)]
pub struct Targets<T: Real> {
    /// Normalized next-frame features, T×F.
    pub features: Tensor<T>,
    /// Next-frame contact labels, T×4.
    pub contacts: Tensor<T>,
    /// Normalized next-frame trajectory block (c_p then c_d), T×24.
    pub trajectory: Tensor<T>,
    /// Next-frame foot and toe positions in the root frame, cm, T×12.
    pub feet: Tensor<T>,
    /// Normalized root block of the clean input frames, T×6.
    pub input_root: Tensor<T>,
}

/// Tape handles of every term; `total` is the one to differentiate.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub gaussian: Var,
    pub smooth: Var,
    pub contact: Var,
    pub fk_position: Var,
    pub fk_sticking: Var,
    pub fk: Var,
    pub feat: Var,
    pub root: Var,
    pub consistency: Var,
    pub trajectory: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown<T: Real>(&self, tape: &Tape<'_, T>) -> LossBreakdown {
        let v = |x: Var| tape.value(x).item().to_f64_lossy();
        LossBreakdown {
            gaussian: v(self.gaussian),
            smooth: v(self.smooth),
            contact: v(self.contact),
            fk: v(self.fk),
            fk_position: v(self.fk_position),
            fk_sticking: v(self.fk_sticking),
            consistency: v(self.consistency),
            feat: v(self.feat),
            root: v(self.root),
            trajectory: v(self.trajectory),
            total: v(self.total),
        }
    }
}

/// Mean over rows of the Euclidean norm of each row.
pub fn mean_row_l2<T: Real>(tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
    let n = tape.row_norm(x, Norm::L2)?;
    Ok(tape.mean(n)?)
}

/// Mean over `n` of `‖μ̂_{n−1} + μ̂_{n+1} − 2μ̂_n‖₂`.
pub fn smoothness<T: Real>(tape: &mut Tape<'_, T>, mean: Var) -> Result<Var> {
    let steps = tape.value(mean).rows();
    if steps < 3 {
        return Err(CoreError::Invalid(format!(
            "smoothness needs at least 3 frames, got {steps}"
        )));
    }
    let a = tape.slice(mean, 0, 0, steps - 2)?;
    let b = tape.slice(mean, 0, 1, steps - 2)?;
    let c = tape.slice(mean, 0, 2, steps - 2)?;
    let ac = tape.add(a, c)?;
    let b2 = tape.scale(b, lit(2.0))?;
    let d = tape.sub(ac, b2)?;
    mean_row_l2(tape, d)
}

/// Foot sticking: for consecutive predicted frames, the previous foot
/// positions carried into the current root frame by the predicted root
/// motion should match the current ones wherever both frames are predicted
/// in contact. Per joint, `p_{n−1} p_n ‖R_y(−ω_n)(x_{n−1} − v_n) − Δh_n − x_n‖₁`,
/// summed over joints and averaged over `n`.
///
/// `feet`: T×12 positions, `root`: T×6 denormalized root blocks,
/// `probs`: T×4 contact probabilities.
pub fn foot_sticking<T: Real>(
    tape: &mut Tape<'_, T>,
    feet: Var,
    root: Var,
    probs: Var,
) -> Result<Var> {
    let steps = tape.value(feet).rows();
    if steps < 2 {
        return Err(CoreError::Invalid(
            "foot sticking needs at least 2 frames".into(),
        ));
    }
    let m = steps - 1;
    let prev = tape.slice(feet, 0, 0, m)?;
    let cur = tape.slice(feet, 0, 1, m)?;
    let root_cur = tape.slice(root, 0, 1, m)?;
    let root_prev = tape.slice(root, 0, 0, m)?;
    let omega = tape.slice(root_cur, 1, 0, 1)?;
    let vx = tape.slice(root_cur, 1, 1, 1)?;
    let vz = tape.slice(root_cur, 1, 2, 1)?;
    let h_cur = tape.slice(root_cur, 1, 3, 1)?;
    let h_prev = tape.slice(root_prev, 1, 3, 1)?;
    let zero = tape.constant(Tensor::zeros(&[m, 1]));
    let neg_omega = tape.scale(omega, lit(-1.0))?;
    let axis = tape.concat(&[zero, neg_omega, zero], 1)?;
    let turn = tape.expmap_to_mat3(axis)?;
    let step = tape.concat(&[vx, zero, vz], 1)?;
    let dh = tape.sub(h_cur, h_prev)?;
    let lift = tape.concat(&[zero, dh, zero], 1)?;

    let mut per_joint = Vec::with_capacity(4);
    for j in 0..4 {
        let a = tape.slice(prev, 1, 3 * j, 3)?;
        let b = tape.slice(cur, 1, 3 * j, 3)?;
        let a = tape.sub(a, step)?;
        let a = tape.mat3_vec(turn, a)?;
        let a = tape.sub(a, lift)?;
        let d = tape.sub(a, b)?;
        per_joint.push(tape.row_norm(d, Norm::L1)?);
    }
    let dist = tape.concat(&per_joint, 1)?;
    let p_prev = tape.slice(probs, 0, 0, m)?;
    let p_cur = tape.slice(probs, 0, 1, m)?;
    let gate = tape.mul(p_prev, p_cur)?;
    let g = tape.mul(gate, dist)?;
    let s = tape.sum(g)?;
    Ok(tape.scale(s, lit(1.0 / m as f64))?)
}

/// Consistency terms `(L_feat, L_root)` from the four overlapped slices.
pub fn consistency<T: Real>(
    tape: &mut Tape<'_, T>,
    model: &Tptn<T>,
    overlapped: &[Var; 4],
    input_root: Var,
) -> Result<(Var, Var)> {
    let [su, sl, du, dl] = *overlapped;
    let ds = tape.sub(su, sl)?;
    let dd = tape.sub(du, dl)?;
    let fs = mean_row_l2(tape, ds)?;
    let fd = mean_row_l2(tape, dd)?;
    let feat = tape.add(fs, fd)?;
    let mut root = None;
    for (z, stage) in [
        (su, Stage::Shallow),
        (sl, Stage::Shallow),
        (du, Stage::Deep),
        (dl, Stage::Deep),
    ] {
        let dec = model.consistency_decode(tape, z, stage)?;
        let d = tape.sub(dec, input_root)?;
        let r = mean_row_l2(tape, d)?;
        root = Some(match root {
            Some(acc) => tape.add(acc, r)?,
            None => r,
        });
    }
    Ok((feat, root.expect("four slices")))
}

/// Build every loss term for one forward pass.
pub fn objective<T: Real>(
    tape: &mut Tape<'_, T>,
    model: &Tptn<T>,
    out: &ForwardOutput,
    targets: &Targets<T>,
    stats: &NormStats,
    skel: &Skeleton,
    w: &LossWeights,
) -> Result<LossVars> {
    let floor = lit(STD_CLAMP);
    let x = tape.constant(targets.features.clone());
    let gaussian = tape.gaussian_nll(x, out.mean, out.logstd, floor)?;
    let smooth = smoothness(tape, out.mean)?;
    let labels = tape.constant(targets.contacts.clone());
    let contact = tape.bce_with_logits(out.contact_logits, labels)?;

    let denorm = denormalize(tape, out.mean, stats)?;
    let feet = foot_positions(tape, skel, denorm)?;
    let gt_feet = tape.constant(targets.feet.clone());
    let diff = tape.sub(feet, gt_feet)?;
    let fk_position = mean_row_l2(tape, diff)?;
    let root = tape.slice(denorm, 1, 0, ROOT_DIM)?;
    let mut probs = tape.sigmoid(out.contact_logits)?;
    if !w.sticking_gate_grad {
        probs = tape.constant(tape.value(probs).clone());
    }
    let fk_sticking = foot_sticking(tape, feet, root, probs)?;
    let fk = tape.add(fk_position, fk_sticking)?;

    let input_root = tape.constant(targets.input_root.clone());
    let (feat, root_term) = consistency(tape, model, &out.overlapped, input_root)?;
    let root2 = tape.scale(root_term, lit(2.0))?;
    let con = tape.add(feat, root2)?;

    let traj = tape.constant(targets.trajectory.clone());
    let trajectory = tape.gaussian_nll(traj, out.traj_mean, out.traj_logstd, floor)?;

    let mut total = gaussian;
    for (term, weight) in [
        (smooth, w.smooth),
        (contact, w.contact),
        (fk, w.fk),
        (con, w.consistency),
        (trajectory, w.trajectory),
    ] {
        let t = tape.scale(term, lit(weight))?;
        total = tape.add(total, t)?;
    }
    Ok(LossVars {
        gaussian,
        smooth,
        contact,
        fk_position,
        fk_sticking,
        fk,
        feat,
        root: root_term,
        consistency: con,
        trajectory,
        total,
    })
}
