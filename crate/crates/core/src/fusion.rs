//! Fusion blocks: leader-follower attention (LFAN), channel attention (CAN),
//! and the valence/arousal regression head.

use std::fmt::Write as _;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamStore};
use crate::seq_blocks::Linear;
use crate::tensor::{Real, Tensor};

/// Fused features plus the attention weights that produced them.
///
/// CAN yields one `[B, T, M]` tensor of per-step modality weights. LFAN
/// yields one `[B, T, T]` tensor per branch: row `t` is the leader query at
/// step `t` attending over that branch's keys.
#[derive(Clone, Debug)]
pub struct FusionOutput {
    pub fused: Var,
    pub attention_weights: Vec<Var>,
}

fn check_branches<F: Real>(tape: &Tape<F>, branches: &[Var], op: &'static str) -> Result<Vec<usize>> {
    if branches.len() < 2 {
        return Err(Error::invalid(
            op,
            format!("need at least 2 branches, got {}", branches.len()),
        ));
    }
    let shape = tape.shape(branches[0]).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape(op, format!("branch shape {shape:?} is not [B, T, D]")));
    }
    for (i, &b) in branches.iter().enumerate().skip(1) {
        if tape.shape(b) != shape.as_slice() {
            return Err(Error::shape(
                op,
                format!("branch {i} has shape {:?}, branch 0 has {shape:?}", tape.shape(b)),
            ));
        }
    }
    Ok(shape)
}

/// Channel attention: a linear layer over the concatenated branch vectors
/// scores each modality per step; the softmax of those scores weights a
/// convex combination of the branches.
#[derive(Clone, Debug)]
pub struct CanFusion {
    pub attention: Linear,
    pub modalities: usize,
    pub dim: usize,
}

impl CanFusion {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        modalities: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let attention = Linear::new(
            store,
            &format!("{name}.attention"),
            modalities * dim,
            modalities,
            None,
            rng,
        );
        CanFusion {
            attention,
            modalities,
            dim,
        }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Binding, branches: &[Var]) -> Result<FusionOutput> {
        let shape = check_branches(tape, branches, "can_fuse")?;
        if branches.len() != self.modalities || shape[2] != self.dim {
            return Err(Error::shape(
                "can_fuse",
                format!(
                    "configured for {} x {}, got {} x {}",
                    self.modalities,
                    self.dim,
                    branches.len(),
                    shape[2]
                ),
            ));
        }
        let cat = tape.concat(branches, 2)?;
        let logits = self.attention.forward(tape, p, cat)?;
        let weights = tape.softmax(logits, 2)?;
        let mut fused = None;
        for (i, &b) in branches.iter().enumerate() {
            let w = tape.narrow(weights, 2, i, 1)?;
            let term = tape.mul(b, w)?;
            fused = Some(match fused {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        Ok(FusionOutput {
            fused: fused.expect("at least two branches"),
            attention_weights: vec![weights],
        })
    }
}

/// Leader-follower attention.
///
/// Every branch `i` gets key and value projections `K_i`, `V_i`; the leader
/// branch also gets a query projection `Q`. For each branch, `Q` attends over
/// that branch's keys across time steps with scaled dot-product softmax. The
/// attended values of all branches are concatenated on the feature axis in
/// branch order, joined with the leader's own features, and projected to the
/// fused width.
#[derive(Clone, Debug)]
pub struct LfanFusion {
    pub leader: usize,
    pub query: Linear,
    pub keys: Vec<Linear>,
    pub values: Vec<Linear>,
    pub output: Linear,
    pub attn_dim: usize,
    pub dim: usize,
}

impl LfanFusion {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        modalities: usize,
        leader: usize,
        dim: usize,
        attn_dim: usize,
        fused_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if leader >= modalities {
            return Err(Error::invalid(
                "lfan_fuse",
                format!("leader index {leader} out of range for {modalities} branches"),
            ));
        }
        let query = Linear::new(store, &format!("{name}.query"), dim, attn_dim, None, rng);
        let mut keys = Vec::new();
        let mut values = Vec::new();
        for i in 0..modalities {
            keys.push(Linear::new(store, &format!("{name}.key{i}"), dim, attn_dim, None, rng));
            values.push(Linear::new(
                store,
                &format!("{name}.value{i}"),
                dim,
                attn_dim,
                None,
                rng,
            ));
        }
        let output = Linear::new(
            store,
            &format!("{name}.output"),
            dim + modalities * attn_dim,
            fused_dim,
            None,
            rng,
        );
        Ok(LfanFusion {
            leader,
            query,
            keys,
            values,
            output,
            attn_dim,
            dim,
        })
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Binding, branches: &[Var]) -> Result<FusionOutput> {
        let shape = check_branches(tape, branches, "lfan_fuse")?;
        if branches.len() != self.keys.len() || shape[2] != self.dim {
            return Err(Error::shape(
                "lfan_fuse",
                format!(
                    "configured for {} x {}, got {} x {}",
                    self.keys.len(),
                    self.dim,
                    branches.len(),
                    shape[2]
                ),
            ));
        }
        let leader = branches[self.leader];
        let q = self.query.forward(tape, p, leader)?;
        let inv_sqrt = F::from_f64_lossy(1.0 / (self.attn_dim as f64).sqrt());
        let mut attended = Vec::with_capacity(branches.len());
        let mut weights = Vec::with_capacity(branches.len());
        for (i, &b) in branches.iter().enumerate() {
            let k = self.keys[i].forward(tape, p, b)?;
            let v = self.values[i].forward(tape, p, b)?;
            let scores = tape.batch_matmul(q, k, true)?;
            let scores = tape.scale(scores, inv_sqrt);
            let attn = tape.softmax(scores, 2)?;
            attended.push(tape.batch_matmul(attn, v, false)?);
            weights.push(attn);
        }
        let cross = tape.concat(&attended, 2)?;
        let joined = tape.concat(&[leader, cross], 2)?;
        let fused = self.output.forward(tape, p, joined)?;
        Ok(FusionOutput {
            fused,
            attention_weights: weights,
        })
    }
}

/// Linear map to (valence, arousal) per step. Outputs are raw; see
/// [`clamp_prediction`] for the export rule.
#[derive(Clone, Debug)]
pub struct RegressionHead {
    pub linear: Linear,
}

impl RegressionHead {
    pub fn new<F: Real, R: Rng + ?Sized>(store: &mut ParamStore<F>, name: &str, din: usize, rng: &mut R) -> Self {
        RegressionHead {
            linear: Linear::new(store, name, din, 2, None, rng),
        }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Binding, fused: Var) -> Result<Var> {
        self.linear.forward(tape, p, fused)
    }
}

/// Export-time clamp of a prediction to the label range.
pub fn clamp_prediction(v: f64) -> f64 {
    v.clamp(-1.0, 1.0)
}

/// One CSV row per time step of `weights[T, C]` (one batch element).
pub fn attention_csv<F: Real>(weights: &Tensor<F>, column_prefix: &str) -> Result<String> {
    let s = weights.shape();
    if s.len() != 2 {
        return Err(Error::shape("attention_csv", format!("expected [T, C], got {s:?}")));
    }
    let mut out = String::from("step");
    for c in 0..s[1] {
        let _ = write!(out, ",{column_prefix}{c}");
    }
    out.push('\n');
    for (t, row) in weights.data().chunks_exact(s[1]).enumerate() {
        let _ = write!(out, "{t}");
        for v in row {
            let _ = write!(out, ",{}", v.to_f64_lossy());
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn can_zero_attention_averages_branches() {
        let mut store = ParamStore::<f64>::new();
        let can = CanFusion::new(&mut store, "can", 2, 4, &mut ChaCha8Rng::seed_from_u64(1));
        can.attention.zero(&mut store);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, 3);
        let a = tape.constant(random(&[1, 5, 4], 2));
        let b = tape.constant(random(&[1, 5, 4], 3));
        let out = can.forward(&mut tape, &p, &[a, b]).unwrap();
        let w = tape.value(out.attention_weights[0]).data();
        assert!(w.iter().all(|&x| x == 0.5));
        let (av, bv, fv) = (tape.value(a).data(), tape.value(b).data(), tape.value(out.fused).data());
        for i in 0..fv.len() {
            assert!((fv[i] - (av[i] + bv[i]) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn can_identical_branches_are_a_fixed_point() {
        let mut store = ParamStore::<f64>::new();
        let can = CanFusion::new(&mut store, "can", 3, 4, &mut ChaCha8Rng::seed_from_u64(1));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, 3);
        let a = tape.constant(random(&[2, 6, 4], 9));
        let out = can.forward(&mut tape, &p, &[a, a, a]).unwrap();
        for (f, x) in tape.value(out.fused).data().iter().zip(tape.value(a).data()) {
            assert!((f - x).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_rejects_mismatched_or_single_branches() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let can = CanFusion::new(&mut store, "can", 2, 4, &mut rng);
        let lfan = LfanFusion::new(&mut store, "lfan", 2, 0, 4, 3, 5, &mut rng).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, 3);
        let a = tape.constant(random(&[1, 5, 4], 2));
        let b = tape.constant(random(&[1, 6, 4], 3));
        assert!(can.forward(&mut tape, &p, &[a, b]).is_err());
        assert!(lfan.forward(&mut tape, &p, &[a, b]).is_err());
        assert!(can.forward(&mut tape, &p, &[a]).is_err());
        assert!(LfanFusion::new(&mut store, "x", 2, 2, 4, 3, 5, &mut rng).is_err());
    }

    #[test]
    fn lfan_single_step_attends_with_weight_one() {
        let mut store = ParamStore::<f64>::new();
        let lfan = LfanFusion::new(&mut store, "lfan", 2, 0, 4, 3, 5, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, 3);
        let a = tape.constant(random(&[1, 1, 4], 5));
        let b = tape.constant(random(&[1, 1, 4], 6));
        let out = lfan.forward(&mut tape, &p, &[a, b]).unwrap();
        for w in &out.attention_weights {
            assert_eq!(tape.value(*w).data(), [1.0]);
        }
        // fused = output(concat(leader, V_0(a), V_1(b)))
        let v0 = lfan.values[0].forward(&mut tape, &p, a).unwrap();
        let v1 = lfan.values[1].forward(&mut tape, &p, b).unwrap();
        let joined = tape.concat(&[a, v0, v1], 2).unwrap();
        let expect = lfan.output.forward(&mut tape, &p, joined).unwrap();
        assert_eq!(tape.value(expect).data(), tape.value(out.fused).data());
    }

    #[test]
    fn head_clamps_only_on_export() {
        assert_eq!(clamp_prediction(1.7), 1.0);
        assert_eq!(clamp_prediction(-3.0), -1.0);
        assert_eq!(clamp_prediction(0.25), 0.25);
    }

    #[test]
    fn attention_csv_has_one_row_per_step() {
        let w = Tensor::<f64>::new(vec![3, 2], vec![0.5, 0.5, 0.25, 0.75, 1.0, 0.0]).unwrap();
        let csv = attention_csv(&w, "m").unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "step,m0,m1");
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[2], "1,0.25,0.75");
    }
}
