//! Assembled LFAN / CAN models.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::{CanFusion, FusionOutput, LfanFusion, RegressionHead};
use crate::params::{Binding, ParamStore};
use crate::seq_blocks::{Backbone, BackboneSpec, ForwardCtx, LinguisticBranch, Tcn, TcnSpec};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Audio,
    Linguistic,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Visual, Modality::Audio, Modality::Linguistic];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Audio => "audio",
            Modality::Linguistic => "linguistic",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "visual" => Ok(Modality::Visual),
            "audio" => Ok(Modality::Audio),
            "linguistic" => Ok(Modality::Linguistic),
            other => Err(Error::Config(format!("unknown modality `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    Lfan,
    Can,
}

impl FusionKind {
    pub fn name(self) -> &'static str {
        match self {
            FusionKind::Lfan => "lfan",
            FusionKind::Can => "can",
        }
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "lfan" => Ok(FusionKind::Lfan),
            "can" => Ok(FusionKind::Can),
            other => Err(Error::Config(format!("unknown model `{other}` (expected lfan or can)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub fusion: FusionKind,
    /// Branch order; also the order of LFAN's cross-modal concatenation.
    pub modalities: Vec<Modality>,
    pub leader: Modality,
    pub visual: BackboneSpec,
    pub audio: BackboneSpec,
    pub tcn_levels: usize,
    pub tcn_kernel: usize,
    pub tcn_channels: usize,
    pub dropout: f64,
    pub linguistic_dim: usize,
    /// Common branch output width `D`.
    pub embed_dim: usize,
    /// Query/key/value width `Da` (LFAN).
    pub attn_dim: usize,
    /// Fused width `Df` (LFAN).
    pub fusion_dim: usize,
}

impl ModelConfig {
    pub fn new(fusion: FusionKind, modalities: Vec<Modality>) -> Self {
        let embed_dim = 64;
        ModelConfig {
            fusion,
            modalities,
            leader: Modality::Visual,
            visual: BackboneSpec::visual(embed_dim),
            audio: BackboneSpec::audio(8, embed_dim),
            tcn_levels: 6,
            tcn_kernel: 3,
            tcn_channels: 64,
            dropout: 0.1,
            linguistic_dim: 768,
            embed_dim,
            attn_dim: 32,
            fusion_dim: 64,
        }
    }

    fn tcn_spec(&self, in_dim: usize) -> TcnSpec {
        TcnSpec {
            in_dim,
            levels: self.tcn_levels,
            kernel: self.tcn_kernel,
            channels: self.tcn_channels,
            dropout: self.dropout,
            out_dim: self.embed_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Config("at least one modality is required".into()));
        }
        let mut seen = self.modalities.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.modalities.len() {
            return Err(Error::Config("duplicate modality".into()));
        }
        if self.modalities.len() > 1 && !self.modalities.contains(&self.leader) {
            return Err(Error::Config(format!(
                "leader `{}` is not among the modalities",
                self.leader
            )));
        }
        self.visual.validate()?;
        self.audio.validate()?;
        self.tcn_spec(1).validate()?;
        if self.visual.out_dim != self.embed_dim || self.audio.out_dim != self.embed_dim {
            return Err(Error::Config("backbone output width must equal embed_dim".into()));
        }
        if self.embed_dim == 0 || self.attn_dim == 0 || self.fusion_dim == 0 || self.linguistic_dim == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        Ok(())
    }

    /// Width of the features entering the regression head.
    pub fn head_dim(&self) -> usize {
        match (self.modalities.len(), self.fusion) {
            (1, _) | (_, FusionKind::Can) => self.embed_dim,
            (_, FusionKind::Lfan) => self.fusion_dim,
        }
    }
}

#[derive(Clone, Debug)]
enum Branch {
    Visual { backbone: Backbone, tcn: Tcn },
    Audio { backbone: Backbone, tcn: Tcn },
    Linguistic(LinguisticBranch),
}

#[derive(Clone, Debug)]
enum Fusion {
    Single,
    Can(CanFusion),
    Lfan(LfanFusion),
}

/// One window batch of model inputs.
///
/// Frame-level modalities are stacked over `batch * steps` frames; the
/// linguistic features are `[batch, steps, linguistic_dim]`.
#[derive(Clone, Debug)]
pub struct ModelInput<F> {
    pub batch: usize,
    pub steps: usize,
    pub visual: Option<Tensor<F>>,
    pub audio: Option<Tensor<F>>,
    pub linguistic: Option<Tensor<F>>,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `[batch, steps, 2]` raw (valence, arousal).
    pub prediction: Var,
    pub attention_weights: Vec<Var>,
}

/// Parameters plus forward definition of an LFAN or CAN model.
#[derive(Clone, Debug)]
pub struct ModelGraph<F> {
    pub config: ModelConfig,
    pub store: ParamStore<F>,
    branches: Vec<(Modality, Branch)>,
    fusion: Fusion,
    head: RegressionHead,
}

impl<F: Real> ModelGraph<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut branches = Vec::new();
        for &m in &config.modalities {
            let name = m.name();
            let branch = match m {
                Modality::Visual => Branch::Visual {
                    backbone: Backbone::new(&mut store, &format!("{name}.backbone"), config.visual.clone(), &mut rng)?,
                    tcn: Tcn::new(
                        &mut store,
                        &format!("{name}.tcn"),
                        config.tcn_spec(config.embed_dim),
                        &mut rng,
                    )?,
                },
                Modality::Audio => Branch::Audio {
                    backbone: Backbone::new(&mut store, &format!("{name}.backbone"), config.audio.clone(), &mut rng)?,
                    tcn: Tcn::new(
                        &mut store,
                        &format!("{name}.tcn"),
                        config.tcn_spec(config.embed_dim),
                        &mut rng,
                    )?,
                },
                Modality::Linguistic => Branch::Linguistic(LinguisticBranch {
                    tcn: Tcn::new(
                        &mut store,
                        &format!("{name}.tcn"),
                        config.tcn_spec(config.linguistic_dim),
                        &mut rng,
                    )?,
                }),
            };
            branches.push((m, branch));
        }
        let m = config.modalities.len();
        let fusion = if m == 1 {
            Fusion::Single
        } else {
            match config.fusion {
                FusionKind::Can => Fusion::Can(CanFusion::new(&mut store, "fusion", m, config.embed_dim, &mut rng)),
                FusionKind::Lfan => {
                    let leader = config
                        .modalities
                        .iter()
                        .position(|&x| x == config.leader)
                        .expect("validated");
                    Fusion::Lfan(LfanFusion::new(
                        &mut store,
                        "fusion",
                        m,
                        leader,
                        config.embed_dim,
                        config.attn_dim,
                        config.fusion_dim,
                        &mut rng,
                    )?)
                }
            }
        };
        let head = RegressionHead::new(&mut store, "head", config.head_dim(), &mut rng);
        Ok(ModelGraph {
            config,
            store,
            branches,
            fusion,
            head,
        })
    }

    pub fn modalities(&self) -> &[Modality] {
        &self.config.modalities
    }

    pub fn head(&self) -> &RegressionHead {
        &self.head
    }

    pub fn can_fusion(&self) -> Option<&CanFusion> {
        match &self.fusion {
            Fusion::Can(c) => Some(c),
            _ => None,
        }
    }

    pub fn lfan_fusion(&self) -> Option<&LfanFusion> {
        match &self.fusion {
            Fusion::Lfan(l) => Some(l),
            _ => None,
        }
    }

    /// Runs every branch and returns `[B, T, D]` encodings in branch order.
    pub fn encode(
        &self,
        tape: &mut Tape<F>,
        p: &Binding,
        input: &ModelInput<F>,
        ctx: &mut ForwardCtx,
    ) -> Result<Vec<Var>> {
        let (b, t, d) = (input.batch, input.steps, self.config.embed_dim);
        let missing = |m: Modality| Error::Data(format!("model requires {m} input, none supplied"));
        let mut outs = Vec::with_capacity(self.branches.len());
        for (m, branch) in &self.branches {
            let enc = match branch {
                Branch::Visual { backbone, tcn } | Branch::Audio { backbone, tcn } => {
                    let frames = match m {
                        Modality::Visual => input.visual.as_ref(),
                        _ => input.audio.as_ref(),
                    }
                    .ok_or_else(|| missing(*m))?;
                    if frames.shape().first() != Some(&(b * t)) {
                        return Err(Error::shape(
                            "encode",
                            format!("{m} input {:?} does not hold {b}x{t} frames", frames.shape()),
                        ));
                    }
                    let x = tape.constant(frames.clone());
                    let feats = backbone.forward(tape, p, x)?;
                    let seq = tape.reshape(feats, &[b, t, d])?;
                    tcn.forward(tape, p, seq, ctx)?
                }
                Branch::Linguistic(lb) => {
                    let feats = input.linguistic.as_ref().ok_or_else(|| missing(*m))?;
                    let x = tape.constant(feats.clone());
                    lb.forward(tape, p, x, ctx)?
                }
            };
            outs.push(enc);
        }
        Ok(outs)
    }

    pub fn fuse(&self, tape: &mut Tape<F>, p: &Binding, branches: &[Var]) -> Result<FusionOutput> {
        match &self.fusion {
            Fusion::Single => Ok(FusionOutput {
                fused: branches[0],
                attention_weights: Vec::new(),
            }),
            Fusion::Can(c) => c.forward(tape, p, branches),
            Fusion::Lfan(l) => l.forward(tape, p, branches),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        p: &Binding,
        input: &ModelInput<F>,
        ctx: &mut ForwardCtx,
    ) -> Result<ModelOutput> {
        let enc = self.encode(tape, p, input, ctx)?;
        let fused = self.fuse(tape, p, &enc)?;
        let prediction = self.head.forward(tape, p, fused.fused)?;
        Ok(ModelOutput {
            prediction,
            attention_weights: fused.attention_weights,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modality_and_kind_parse() {
        assert_eq!("audio".parse::<Modality>().unwrap(), Modality::Audio);
        assert!("smell".parse::<Modality>().is_err());
        assert_eq!("can".parse::<FusionKind>().unwrap(), FusionKind::Can);
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::new(FusionKind::Lfan, vec![Modality::Audio, Modality::Linguistic]);
        assert!(c.validate().is_err(), "leader visual missing");
        c.leader = Modality::Audio;
        assert!(c.validate().is_ok());
        c.modalities.push(Modality::Audio);
        assert!(c.validate().is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let c = ModelConfig::new(FusionKind::Can, vec![Modality::Visual, Modality::Audio]);
        let a = ModelGraph::<f32>::new(c.clone(), 3).unwrap();
        let b = ModelGraph::<f32>::new(c, 3).unwrap();
        assert_eq!(a.store.values(), b.store.values());
    }
}
