//! Per-modality branch encoders: small 2-D CNN backbones split into three
//! unfreezable layer groups, and the dilated causal TCN.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{uniform_init, Binding, Group, ParamId, ParamStore};
use crate::tensor::Real;

/// Forward-pass mode and the run's random stream (dropout masks).
pub struct ForwardCtx<'a> {
    pub training: bool,
    pub rng: &'a mut dyn RngCore,
}

/// Fully connected layer `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        din: usize,
        dout: usize,
        group: Option<Group>,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), uniform_init(&[din, dout], din, rng), group);
        let bias = store.add(format!("{name}.bias"), uniform_init(&[dout], din, rng), group);
        Linear { weight, bias }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Binding, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.weight), Some(p.var(self.bias)))
    }

    /// Sets weight and bias to zero.
    pub fn zero<F: Real>(&self, store: &mut ParamStore<F>) {
        for id in [self.weight, self.bias] {
            store
                .get_mut(id)
                .value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = F::zero());
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels of the three stride-2 stages, input side first.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub out_dim: usize,
}

impl BackboneSpec {
    /// RGB frames after the 40x40 crop.
    pub fn visual(out_dim: usize) -> Self {
        BackboneSpec {
            in_channels: 3,
            height: 40,
            width: 40,
            channels: vec![8, 16, 32],
            kernel: 3,
            out_dim,
        }
    }

    /// Logmel patches of 64 mel bands by `frames` spectrogram rows.
    pub fn audio(frames: usize, out_dim: usize) -> Self {
        BackboneSpec {
            in_channels: 1,
            height: 64,
            width: frames,
            channels: vec![8, 16, 32],
            kernel: 3,
            out_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != 3 {
            return Err(Error::Config(format!(
                "backbone needs exactly 3 stages, got {}",
                self.channels.len()
            )));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::Config("backbone kernel must be odd".into()));
        }
        if [self.in_channels, self.height, self.width, self.out_dim]
            .iter()
            .chain(&self.channels)
            .any(|&d| d == 0)
        {
            return Err(Error::Config("backbone extents must be positive".into()));
        }
        Ok(())
    }
}

/// Group tag of stage `i` (0 = input side) in a three-stage backbone.
fn stage_group(i: usize) -> Group {
    (3 - i) as Group
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub spec: BackboneSpec,
    stages: Vec<(ParamId, ParamId)>,
    proj: Linear,
}

impl Backbone {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        spec: BackboneSpec,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let k = spec.kernel;
        let mut cin = spec.in_channels;
        let mut stages = Vec::new();
        for (i, &cout) in spec.channels.iter().enumerate() {
            let fan_in = cin * k * k;
            let group = Some(stage_group(i));
            let w = store.add(
                format!("{name}.stage{i}.weight"),
                uniform_init(&[cout, cin, k, k], fan_in, rng),
                group,
            );
            let b = store.add(
                format!("{name}.stage{i}.bias"),
                uniform_init(&[cout], fan_in, rng),
                group,
            );
            stages.push((w, b));
            cin = cout;
        }
        let proj = Linear::new(store, &format!("{name}.proj"), cin, spec.out_dim, Some(1), rng);
        Ok(Backbone { spec, stages, proj })
    }

    /// `frames[N, C, H, W]` to one `out_dim` vector per frame.
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Binding, frames: Var) -> Result<Var> {
        let s = tape.shape(frames).to_vec();
        let want = [self.spec.in_channels, self.spec.height, self.spec.width];
        if s.len() != 4 || s[1..] != want {
            return Err(Error::shape(
                "backbone_forward",
                format!("expected [N, {}, {}, {}], got {s:?}", want[0], want[1], want[2]),
            ));
        }
        let mut h = frames;
        for &(w, b) in &self.stages {
            h = tape.conv2d(h, p.var(w), Some(p.var(b)), 2, self.spec.kernel / 2)?;
            h = tape.relu(h);
        }
        let hs = tape.shape(h).to_vec();
        let h = tape.reshape(h, &[hs[0], hs[1], hs[2] * hs[3]])?;
        let h = tape.mean(h, 2)?;
        let h = tape.reshape(h, &[hs[0], hs[1]])?;
        self.proj.forward(tape, p, h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TcnSpec {
    pub in_dim: usize,
    pub levels: usize,
    pub kernel: usize,
    pub channels: usize,
    pub dropout: f64,
    pub out_dim: usize,
}

impl TcnSpec {
    pub fn new(in_dim: usize, out_dim: usize) -> Self {
        TcnSpec {
            in_dim,
            levels: 6,
            kernel: 3,
            channels: 64,
            dropout: 0.1,
            out_dim,
        }
    }

    /// Number of input steps (including the current one) that reach an output.
    pub fn receptive_field(&self) -> usize {
        1 + (0..self.levels)
            .map(|i| 2 * (self.kernel - 1) * (1usize << i))
            .sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.kernel == 0 || self.channels == 0 || self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::Config("TCN extents must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("TCN dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct TcnLevel {
    dilation: usize,
    conv1: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
    downsample: Option<(ParamId, ParamId)>,
}

/// Residual stack of dilated causal convolutions followed by a linear
/// projection to the branch output width.
#[derive(Clone, Debug)]
pub struct Tcn {
    pub spec: TcnSpec,
    levels: Vec<TcnLevel>,
    pub proj: Linear,
}

impl Tcn {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        spec: TcnSpec,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let k = spec.kernel;
        let c = spec.channels;
        let mut conv = |store: &mut ParamStore<F>, tag: String, taps: usize, cin: usize| {
            let w = store.add(
                format!("{tag}.weight"),
                uniform_init(&[taps, cin, c], taps * cin, rng),
                None,
            );
            let b = store.add(format!("{tag}.bias"), uniform_init(&[c], taps * cin, rng), None);
            (w, b)
        };
        let mut levels = Vec::new();
        let mut cin = spec.in_dim;
        for i in 0..spec.levels {
            let conv1 = conv(store, format!("{name}.level{i}.conv1"), k, cin);
            let conv2 = conv(store, format!("{name}.level{i}.conv2"), k, c);
            let downsample = (cin != c).then(|| conv(store, format!("{name}.level{i}.downsample"), 1, cin));
            levels.push(TcnLevel {
                dilation: 1 << i,
                conv1,
                conv2,
                downsample,
            });
            cin = c;
        }
        let proj = Linear::new(store, &format!("{name}.proj"), c, spec.out_dim, None, rng);
        Ok(Tcn { spec, levels, proj })
    }

    /// `x[B, T, in_dim]` to `[B, T, out_dim]`, causal in `T`.
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Binding, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 3 || s[2] != self.spec.in_dim {
            return Err(Error::shape(
                "tcn_forward",
                format!("expected [B, T, {}], got {s:?}", self.spec.in_dim),
            ));
        }
        let mut h = x;
        for level in &self.levels {
            let d = level.dilation;
            let mut y = tape.conv1d_causal(h, p.var(level.conv1.0), Some(p.var(level.conv1.1)), d)?;
            y = tape.relu(y);
            y = tape.dropout(y, self.spec.dropout, ctx.training, &mut *ctx.rng)?;
            y = tape.conv1d_causal(y, p.var(level.conv2.0), Some(p.var(level.conv2.1)), d)?;
            y = tape.relu(y);
            y = tape.dropout(y, self.spec.dropout, ctx.training, &mut *ctx.rng)?;
            let res = match level.downsample {
                Some((w, b)) => tape.conv1d_causal(h, p.var(w), Some(p.var(b)), 1)?,
                None => h,
            };
            let sum = tape.add(y, res)?;
            h = tape.relu(sum);
        }
        self.proj.forward(tape, p, h)
    }
}

/// Linguistic branch: a TCN fed directly by frame-aligned token features.
#[derive(Clone, Debug)]
pub struct LinguisticBranch {
    pub tcn: Tcn,
}

impl LinguisticBranch {
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Binding, tokens: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let s = tape.shape(tokens);
        if s.last() != Some(&self.tcn.spec.in_dim) {
            return Err(Error::shape(
                "linguistic_branch_forward",
                format!("feature width {:?} != {}", s.last(), self.tcn.spec.in_dim),
            ));
        }
        self.tcn.forward(tape, p, tokens, ctx)
    }
}
