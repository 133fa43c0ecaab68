//! The two-part transformer: four auto-regressive modules (shallow/deep ×
//! upper/lower), feature fusion, consistency modules, aggregation and the
//! foot-contact MLP.

pub mod fk;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tptn_autodiff::{lit, ParamId, ParamStore, Real, Tape, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::features::{
    feature_dim, ControlLayout, PartitionScheme, CONTACT_DIM, NUM_JOINTS, ROOT_DIM, TRAJ_DIM,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub layers_per_arm: usize,
    /// Local attention window, frames.
    pub lm: usize,
    pub k_s: usize,
    pub k_d: usize,
    pub dropout_in: f64,
    pub dropout_spatial: f64,
    /// Leading channels of every stream reserved for the overlapped features.
    pub d_root: usize,
    pub ffn: usize,
    pub foot_hidden: usize,
    pub n_types: usize,
    /// Longest sequence the positional encoding accepts.
    pub max_len: usize,
    pub joints: usize,
    pub partition: PartitionScheme,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_heads: 8,
            layers_per_arm: 6,
            lm: 8,
            k_s: 3,
            k_d: 1,
            dropout_in: 0.5,
            dropout_spatial: 0.1,
            d_root: 32,
            ffn: 256,
            foot_hidden: 128,
            n_types: 20,
            max_len: 512,
            joints: NUM_JOINTS,
            partition: PartitionScheme::canonical(),
        }
    }
}

impl ModelConfig {
    /// Small widths for tests and overfit runs.
    pub fn tiny(n_types: usize) -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            d_root: 8,
            ffn: 64,
            foot_hidden: 32,
            n_types,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_root == 0 || self.d_root >= self.d_model {
            return bad(format!("d_root {} must lie in 1..d_model", self.d_root));
        }
        if self.k_s == 0 || self.k_d == 0 || self.lm == 0 || self.layers_per_arm == 0 {
            return bad("kernel sizes, window and layer count must be positive".into());
        }
        if self.ffn == 0 || self.foot_hidden == 0 || self.n_types == 0 {
            return bad("ffn, foot_hidden and n_types must be positive".into());
        }
        for p in [self.dropout_in, self.dropout_spatial] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("dropout probability {p} outside [0, 1)"));
            }
        }
        self.partition.validate(self.joints)
    }

    pub fn feature_dim(&self) -> usize {
        feature_dim(self.joints)
    }

    pub fn control_layout(&self) -> ControlLayout {
        ControlLayout {
            joints: self.joints,
            n_types: self.n_types,
        }
    }

    pub fn upper_dim(&self) -> usize {
        self.partition.upper_dim()
    }

    pub fn lower_dim(&self) -> usize {
        self.partition.lower_dim()
    }

    /// Width of the aggregation output: motion mean and log-std, then the
    /// trajectory mean and log-std.
    pub fn output_dim(&self) -> usize {
        2 * self.feature_dim() + 2 * TRAJ_DIM
    }

    /// Number of frames that can influence one output frame.
    pub fn trl(&self) -> usize {
        trl(self.k_s, self.k_d, self.lm, self.layers_per_arm)
    }

    /// Frames reaching one output of the shallow or deep stage.
    pub fn receptive_field(&self, stage: Stage) -> usize {
        let attn = self.layers_per_arm * (self.lm - 1);
        match stage {
            Stage::Shallow => self.k_s + attn,
            Stage::Deep => self.trl(),
        }
    }
}

/// Temporal receptive field: `(k_s−1) + (k_d−1) + lm + Σ_{i=2}^{2L} (lm−1)`
/// for `L` layers per module.
pub fn trl(k_s: usize, k_d: usize, lm: usize, layers_per_arm: usize) -> usize {
    (k_s - 1) + (k_d - 1) + lm + (2 * layers_per_arm - 1) * (lm - 1)
}

/// Row-major T×T mask; row `i` may attend to `max(0, i−lm+1) ..= i`.
pub fn local_causal_mask(steps: usize, lm: usize) -> Vec<bool> {
    let mut m = vec![false; steps * steps];
    for i in 0..steps {
        for j in (i + 1).saturating_sub(lm)..=i {
            m[i * steps + j] = true;
        }
    }
    m
}

/// Sinusoidal absolute encoding for positions `offset .. offset + steps`.
pub fn positional_encoding<T: Real>(steps: usize, d: usize, offset: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(steps * d);
    for t in 0..steps {
        let pos = (offset + t) as f64;
        for i in 0..d {
            let freq = 10000f64.powf(-((i - i % 2) as f64) / d as f64);
            let a = pos * freq;
            data.push(lit(if i % 2 == 0 { a.sin() } else { a.cos() }));
        }
    }
    Tensor::from_vec(vec![steps, d], data).expect("sized")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Shallow,
    Deep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Upper,
    Lower,
}

/// Dropout randomness for a training pass; `Eval` disables dropout.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Layer {
    ln1: Norm,
    q: Dense,
    k: Dense,
    v: Dense,
    o: Dense,
    ln2: Norm,
    ff1: Dense,
    ff2: Dense,
}

#[derive(Debug, Clone)]
struct Arm {
    conv: Dense,
    kernel: usize,
    layers: Vec<Layer>,
    ln: Norm,
}

#[derive(Debug, Clone)]
struct Mlp {
    l1: Dense,
    l2: Dense,
}

#[derive(Debug, Clone)]
struct Ids {
    arms: [Arm; 4],
    fuse_to_upper: Dense,
    fuse_to_lower: Dense,
    aggregate: Dense,
    foot: Mlp,
    cm: Option<[Mlp; 2]>,
}

/// Inputs of one sequence, all normalized, one row per frame.
#[derive(Debug, Clone)]
pub struct SequenceInput<T: Real> {
    pub upper: Tensor<T>,
    pub lower: Tensor<T>,
    pub controls: Tensor<T>,
    /// Position of the first row in the positional encoding.
    pub position_offset: usize,
}

/// Tape handles of one forward pass. Row `t` predicts the frame after input
/// row `t`.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub mean: Var,
    pub logstd: Var,
    pub traj_mean: Var,
    pub traj_logstd: Var,
    pub contact_logits: Var,
    /// Overlapped slices in the order shallow upper, shallow lower, deep
    /// upper, deep lower.
    pub overlapped: [Var; 4],
}

/// Model parameters plus the handles that locate them in the store.
#[derive(Debug, Clone)]
pub struct Tptn<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    ids: Ids,
}

struct Init<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Real> Init<'_, T> {
    fn uniform(&mut self, name: String, rows: usize, cols: usize, bound: f64) -> ParamId {
        let data = (0..rows * cols)
            .map(|_| lit(self.rng.random_range(-bound..=bound)))
            .collect();
        self.store.add(
            name,
            Tensor::from_vec(vec![rows, cols], data).expect("sized"),
        )
    }

    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Dense {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Dense {
            w: self.uniform(format!("{name}.w"), fan_in, fan_out, bound),
            b: self
                .store
                .add(format!("{name}.b"), Tensor::zeros(&[1, fan_out])),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            g: self.store.add(format!("{name}.g"), Tensor::ones(&[1, d])),
            b: self.store.add(format!("{name}.b"), Tensor::zeros(&[1, d])),
        }
    }

    fn arm(&mut self, name: &str, cfg: &ModelConfig, input: usize, kernel: usize) -> Arm {
        let d = cfg.d_model;
        let conv = self.dense(
            &format!("{name}.conv"),
            kernel * (input + cfg.control_layout().dim()),
            d,
        );
        let layers = (0..cfg.layers_per_arm)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                Layer {
                    ln1: self.norm(&format!("{p}.ln1"), d),
                    q: self.dense(&format!("{p}.q"), d, d),
                    k: self.dense(&format!("{p}.k"), d, d),
                    v: self.dense(&format!("{p}.v"), d, d),
                    o: self.dense(&format!("{p}.o"), d, d),
                    ln2: self.norm(&format!("{p}.ln2"), d),
                    ff1: self.dense(&format!("{p}.ff1"), d, cfg.ffn),
                    ff2: self.dense(&format!("{p}.ff2"), cfg.ffn, d),
                }
            })
            .collect();
        Arm {
            conv,
            kernel,
            layers,
            ln: self.norm(&format!("{name}.ln"), d),
        }
    }

    fn mlp(&mut self, name: &str, input: usize, hidden: usize, out: usize) -> Mlp {
        Mlp {
            l1: self.dense(&format!("{name}.l1"), input, hidden),
            l2: self.dense(&format!("{name}.l2"), hidden, out),
        }
    }
}

const ARM_NAMES: [&str; 4] = ["arm_s_upper", "arm_s_lower", "arm_d_upper", "arm_d_lower"];

impl<T: Real> Tptn<T> {
    /// Fresh parameters drawn from `seed`. The same seed gives the same
    /// weights (up to rounding) at every precision.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let cfg = &config;
        let d = cfg.d_model;
        let arms = [
            init.arm(ARM_NAMES[0], cfg, cfg.upper_dim(), cfg.k_s),
            init.arm(ARM_NAMES[1], cfg, cfg.lower_dim(), cfg.k_s),
            init.arm(ARM_NAMES[2], cfg, d, cfg.k_d),
            init.arm(ARM_NAMES[3], cfg, d, cfg.k_d),
        ];
        let fuse_to_upper = init.dense("fuse_to_upper", d, d);
        let fuse_to_lower = init.dense("fuse_to_lower", d, d);
        let aggregate = init.dense("aggregate", 2 * d, cfg.output_dim());
        let foot = init.mlp("foot_mlp", 2 * d, cfg.foot_hidden, CONTACT_DIM);
        let cm = Some([
            init.mlp("cm_shallow", cfg.d_root, cfg.d_root, ROOT_DIM),
            init.mlp("cm_deep", cfg.d_root, cfg.d_root, ROOT_DIM),
        ]);
        Ok(Self {
            config,
            params: store,
            ids: Ids {
                arms,
                fuse_to_upper,
                fuse_to_lower,
                aggregate,
                foot,
                cm,
            },
        })
    }

    /// Rebuild from stored parameters: a fresh skeleton of the right shapes
    /// whose values are taken by name from `params`. Consistency modules are
    /// optional.
    pub fn from_params(config: ModelConfig, params: &[(String, Tensor<T>)]) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let has_cm = params.iter().any(|(n, _)| n.starts_with("cm_"));
        if !has_cm {
            model = model.without_consistency_modules();
        }
        let mut seen = 0;
        for (_, p) in model.params.iter_mut() {
            let (_, value) = params
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| CoreError::Checkpoint(format!("missing parameter {}", p.name)))?;
            if value.shape() != p.value.shape() {
                return Err(CoreError::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    value.shape(),
                    p.value.shape()
                )));
            }
            p.value = value.clone();
            seen += 1;
        }
        if seen != params.len() {
            return Err(CoreError::Checkpoint(format!(
                "{} unexpected parameters",
                params.len() - seen
            )));
        }
        Ok(model)
    }

    /// Same network at another precision.
    pub fn cast<U: Real>(&self) -> Tptn<U> {
        Tptn {
            config: self.config.clone(),
            params: self.params.cast(),
            ids: self.ids.clone(),
        }
    }

    /// Drop the training-only consistency modules. Their parameters are
    /// removed from the store, so deployed graphs cannot reference them.
    pub fn without_consistency_modules(&self) -> Self {
        if self.ids.cm.is_none() {
            return self.clone();
        }
        let mut store = ParamStore::new();
        let mut remap = vec![None; self.params.len()];
        for (id, p) in self.params.iter() {
            if !p.name.starts_with("cm_") {
                remap[id.0] = Some(store.add(p.name.clone(), p.value.clone()));
            }
        }
        let m = |id: ParamId| remap[id.0].expect("kept parameter");
        let dense = |d: Dense| Dense {
            w: m(d.w),
            b: m(d.b),
        };
        let norm = |n: Norm| Norm {
            g: m(n.g),
            b: m(n.b),
        };
        let arm = |a: &Arm| Arm {
            conv: dense(a.conv),
            kernel: a.kernel,
            layers: a
                .layers
                .iter()
                .map(|l| Layer {
                    ln1: norm(l.ln1),
                    q: dense(l.q),
                    k: dense(l.k),
                    v: dense(l.v),
                    o: dense(l.o),
                    ln2: norm(l.ln2),
                    ff1: dense(l.ff1),
                    ff2: dense(l.ff2),
                })
                .collect(),
            ln: norm(a.ln),
        };
        let ids = &self.ids;
        Self {
            config: self.config.clone(),
            params: store,
            ids: Ids {
                arms: [
                    arm(&ids.arms[0]),
                    arm(&ids.arms[1]),
                    arm(&ids.arms[2]),
                    arm(&ids.arms[3]),
                ],
                fuse_to_upper: dense(ids.fuse_to_upper),
                fuse_to_lower: dense(ids.fuse_to_lower),
                aggregate: dense(ids.aggregate),
                foot: Mlp {
                    l1: dense(ids.foot.l1),
                    l2: dense(ids.foot.l2),
                },
                cm: None,
            },
        }
    }

    pub fn has_consistency_modules(&self) -> bool {
        self.ids.cm.is_some()
    }

    pub fn param_count(&self) -> usize {
        self.params.total_count()
    }

    /// Parameters used at inference (everything but the consistency modules).
    pub fn inference_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(_, p)| !p.name.starts_with("cm_"))
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    /// Parameter count of one consistency module.
    pub fn cm_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(_, p)| p.name.starts_with("cm_shallow"))
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    /// Set the two fusion maps to zero (deep inputs then equal the shallow
    /// outputs).
    pub fn zero_fusion(&mut self) {
        for d in [self.ids.fuse_to_upper, self.ids.fuse_to_lower] {
            for id in [d.w, d.b] {
                self.params
                    .get_mut(id)
                    .value
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = T::zero());
            }
        }
    }

    /// Set the aggregation layer to zero.
    pub fn zero_aggregate(&mut self) {
        for id in [self.ids.aggregate.w, self.ids.aggregate.b] {
            self.params
                .get_mut(id)
                .value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = T::zero());
        }
    }

    fn dense(&self, tape: &mut Tape<'_, T>, x: Var, d: Dense) -> Result<Var> {
        let (w, b) = (tape.param(d.w)?, tape.param(d.b)?);
        Ok(tape.linear(x, w, Some(b))?)
    }

    fn norm(&self, tape: &mut Tape<'_, T>, x: Var, n: Norm) -> Result<Var> {
        let (g, b) = (tape.param(n.g)?, tape.param(n.b)?);
        Ok(tape.layer_norm(x, g, b, lit(1e-5))?)
    }

    fn mlp(&self, tape: &mut Tape<'_, T>, x: Var, m: &Mlp) -> Result<Var> {
        let h = self.dense(tape, x, m.l1)?;
        let h = tape.relu(h)?;
        self.dense(tape, h, m.l2)
    }

    fn dropout(
        tape: &mut Tape<'_, T>,
        x: Var,
        p: f64,
        spatial: bool,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        Ok(match mode {
            Mode::Eval => x,
            Mode::Train(rng) if spatial => tape.spatial_dropout1d(x, p, true, &mut **rng)?,
            Mode::Train(rng) => tape.dropout(x, p, true, &mut **rng)?,
        })
    }

    fn layer(&self, tape: &mut Tape<'_, T>, x: Var, l: &Layer) -> Result<Var> {
        let h = self.norm(tape, x, l.ln1)?;
        let q = self.dense(tape, h, l.q)?;
        let k = self.dense(tape, h, l.k)?;
        let v = self.dense(tape, h, l.v)?;
        let a = tape.local_attention(q, k, v, self.config.n_heads, self.config.lm)?;
        let a = self.dense(tape, a, l.o)?;
        let x = tape.add(x, a)?;
        let h = self.norm(tape, x, l.ln2)?;
        let h = self.dense(tape, h, l.ff1)?;
        let h = tape.relu(h)?;
        let h = self.dense(tape, h, l.ff2)?;
        Ok(tape.add(x, h)?)
    }

    fn arm(
        &self,
        tape: &mut Tape<'_, T>,
        arm: &Arm,
        input: Var,
        controls: Var,
        offset: usize,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let x = Self::dropout(tape, input, cfg.dropout_in, false, mode)?;
        let x = tape.concat(&[x, controls], 1)?;
        let (w, b) = (tape.param(arm.conv.w)?, tape.param(arm.conv.b)?);
        let x = tape.causal_conv1d(x, w, Some(b), arm.kernel)?;
        let steps = tape.value(x).rows();
        let pe = tape.constant(positional_encoding(steps, cfg.d_model, offset));
        let x = tape.add(x, pe)?;
        let mut x = Self::dropout(tape, x, cfg.dropout_spatial, true, mode)?;
        for l in &arm.layers {
            x = self.layer(tape, x, l)?;
        }
        self.norm(tape, x, arm.ln)
    }

    /// Full forward pass. Training mode applies dropout from the given
    /// generator; every output row depends only on input rows at or before it.
    pub fn forward(
        &self,
        tape: &mut Tape<'_, T>,
        input: &SequenceInput<T>,
        mode: Mode<'_>,
    ) -> Result<ForwardOutput> {
        let vars = self.input_vars(tape, input, false)?;
        self.forward_vars(tape, vars, input.position_offset, mode)
    }

    fn forward_vars(
        &self,
        tape: &mut Tape<'_, T>,
        vars: [Var; 3],
        off: usize,
        mut mode: Mode<'_>,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let [zs_u, zs_l, zd_u, zd_l] = self.streams_of(tape, vars, off, &mut mode)?;
        let both = tape.concat(&[zd_u, zd_l], 1)?;
        let out = self.dense(tape, both, self.ids.aggregate)?;
        let f = cfg.feature_dim();
        let mean = tape.slice(out, 1, 0, f)?;
        let logstd = tape.slice(out, 1, f, f)?;
        let traj_mean = tape.slice(out, 1, 2 * f, TRAJ_DIM)?;
        let traj_logstd = tape.slice(out, 1, 2 * f + TRAJ_DIM, TRAJ_DIM)?;
        let lower_both = tape.concat(&[zs_l, zd_l], 1)?;
        let contact_logits = self.mlp(tape, lower_both, &self.ids.foot)?;
        let mut overlapped = [zs_u; 4];
        for (o, z) in overlapped.iter_mut().zip([zs_u, zs_l, zd_u, zd_l]) {
            *o = tape.slice(z, 1, 0, cfg.d_root)?;
        }
        Ok(ForwardOutput {
            mean,
            logstd,
            traj_mean,
            traj_logstd,
            contact_logits,
            overlapped,
        })
    }

    /// The four stream outputs `[Z_s^u, Z_s^l, Z_d^u, Z_d^l]`, each T×d_model.
    pub fn streams(
        &self,
        tape: &mut Tape<'_, T>,
        input: &SequenceInput<T>,
        mode: &mut Mode<'_>,
    ) -> Result<[Var; 4]> {
        let vars = self.input_vars(tape, input, false)?;
        self.streams_of(tape, vars, input.position_offset, mode)
    }

    /// Validate shapes and put the three inputs on the tape, as constants or
    /// as differentiable leaves.
    fn input_vars(
        &self,
        tape: &mut Tape<'_, T>,
        input: &SequenceInput<T>,
        leaf: bool,
    ) -> Result<[Var; 3]> {
        let cfg = &self.config;
        let steps = input.upper.rows();
        if steps == 0 {
            return Err(CoreError::Invalid("empty input sequence".into()));
        }
        if input.position_offset + steps > cfg.max_len {
            return Err(CoreError::Invalid(format!(
                "sequence end {} exceeds max_len {}",
                input.position_offset + steps,
                cfg.max_len
            )));
        }
        let expect = [
            (&input.upper, cfg.upper_dim(), "upper"),
            (&input.lower, cfg.lower_dim(), "lower"),
            (&input.controls, cfg.control_layout().dim(), "controls"),
        ];
        for (t, cols, what) in expect {
            if t.rows() != steps || t.cols() != cols {
                return Err(CoreError::Invalid(format!(
                    "{what} input has shape {:?}, expected [{steps}, {cols}]",
                    t.shape()
                )));
            }
        }
        let mut put = |t: &Tensor<T>| {
            if leaf {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        Ok([put(&input.upper), put(&input.lower), put(&input.controls)])
    }

    fn streams_of(
        &self,
        tape: &mut Tape<'_, T>,
        [upper, lower, controls]: [Var; 3],
        off: usize,
        mode: &mut Mode<'_>,
    ) -> Result<[Var; 4]> {
        let a = &self.ids.arms;
        let zs_u = self.arm(tape, &a[0], upper, controls, off, mode)?;
        let zs_l = self.arm(tape, &a[1], lower, controls, off, mode)?;
        let (in_u, in_l) = self.fuse(tape, zs_u, zs_l)?;
        let zd_u = self.arm(tape, &a[2], in_u, controls, off, mode)?;
        let zd_l = self.arm(tape, &a[3], in_l, controls, off, mode)?;
        Ok([zs_u, zs_l, zd_u, zd_l])
    }

    /// Feature fusion: `Z_s^u + W_l Z_s^l` feeds the deep upper module and
    /// `Z_s^l + W_u Z_s^u` the deep lower one.
    pub fn fuse(&self, tape: &mut Tape<'_, T>, zs_u: Var, zs_l: Var) -> Result<(Var, Var)> {
        let from_l = self.dense(tape, zs_l, self.ids.fuse_to_upper)?;
        let from_u = self.dense(tape, zs_u, self.ids.fuse_to_lower)?;
        Ok((tape.add(zs_u, from_l)?, tape.add(zs_l, from_u)?))
    }

    /// Decode an overlapped slice back to the root block with the consistency
    /// module of `stage`.
    pub fn consistency_decode(
        &self,
        tape: &mut Tape<'_, T>,
        slice: Var,
        stage: Stage,
    ) -> Result<Var> {
        let cm = self.ids.cm.as_ref().ok_or_else(|| {
            CoreError::Invalid("consistency modules are not available in an inference model".into())
        })?;
        let m = match stage {
            Stage::Shallow => &cm[0],
            Stage::Deep => &cm[1],
        };
        self.mlp(tape, slice, m)
    }

    /// For every input row, the largest absolute gradient of the summed
    /// outputs at `row` with respect to that row's inputs. Zero exactly where
    /// the row is outside the receptive field.
    pub fn input_influence(&self, input: &SequenceInput<T>, row: usize) -> Result<Vec<f64>> {
        let steps = input.upper.rows();
        if row >= steps {
            return Err(CoreError::Invalid(format!(
                "row {row} outside {steps} steps"
            )));
        }
        let mut tape = Tape::with_params(&self.params);
        let vars = self.input_vars(&mut tape, input, true)?;
        let out = self.forward_vars(&mut tape, vars, input.position_offset, Mode::Eval)?;
        let mut parts = Vec::new();
        for v in [
            out.mean,
            out.logstd,
            out.traj_mean,
            out.traj_logstd,
            out.contact_logits,
        ] {
            let r = tape.slice(v, 0, row, 1)?;
            parts.push(tape.sum(r)?);
        }
        let mut total = parts[0];
        for &p in &parts[1..] {
            total = tape.add(total, p)?;
        }
        let grads = tape.backward(total)?;
        let mut influence = vec![0.0f64; steps];
        for v in vars {
            let Some(g) = grads.wrt(v) else { continue };
            for (r, slot) in influence.iter_mut().enumerate() {
                let m = g
                    .row_slice(r)
                    .iter()
                    .map(|x| x.to_f64_lossy().abs())
                    .fold(0.0, f64::max);
                *slot = slot.max(m);
            }
        }
        Ok(influence)
    }

    /// Evaluation-mode forward returning plain values.
    pub fn predict(&self, input: &SequenceInput<T>) -> Result<Prediction<T>> {
        let mut tape = Tape::with_params(&self.params).without_grad();
        let out = self.forward(&mut tape, input, Mode::Eval)?;
        Ok(Prediction {
            mean: tape.value(out.mean).clone(),
            logstd: tape.value(out.logstd).clone(),
            traj_mean: tape.value(out.traj_mean).clone(),
            traj_logstd: tape.value(out.traj_logstd).clone(),
            contact_logits: tape.value(out.contact_logits).clone(),
        })
    }
}

/// Values of one evaluation-mode forward pass, in normalized units.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T: Real> {
    pub mean: Tensor<T>,
    pub logstd: Tensor<T>,
    pub traj_mean: Tensor<T>,
    pub traj_logstd: Tensor<T>,
    pub contact_logits: Tensor<T>,
}
