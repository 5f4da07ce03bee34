//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{FusionKind, Modality, ModelConfig};
use crate::seq_blocks::BackboneSpec;
use crate::train::optim::AdamConfig;
use crate::train::scheduler::SchedulerConfig;

/// Which quantity drives the plateau scheduler and seed selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Monitor {
    Mean,
    Valence,
    Arousal,
}

impl Monitor {
    pub fn name(self) -> &'static str {
        match self {
            Monitor::Mean => "mean",
            Monitor::Valence => "valence",
            Monitor::Arousal => "arousal",
        }
    }

    pub fn pick(self, r: &crate::metrics::CccReport) -> f64 {
        match self {
            Monitor::Mean => r.mean_ccc,
            Monitor::Valence => r.ccc_valence,
            Monitor::Arousal => r.ccc_arousal,
        }
    }
}

impl FromStr for Monitor {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Monitor::Mean),
            "valence" => Ok(Monitor::Valence),
            "arousal" => Ok(Monitor::Arousal),
            _ => Err(Error::Config(format!(
                "unknown monitor `{s}` (expected mean, valence or arousal)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FoldSelection {
    All,
    One(usize),
}

impl FromStr for FoldSelection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(FoldSelection::All);
        }
        s.parse::<usize>()
            .ok()
            .filter(|&k| k < crate::folds::TOTAL_FOLDS)
            .map(FoldSelection::One)
            .ok_or_else(|| Error::Config(format!("fold must be `all` or 0..=5, got `{s}`")))
    }
}

impl std::fmt::Display for FoldSelection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FoldSelection::All => f.write_str("all"),
            FoldSelection::One(k) => write!(f, "{k}"),
        }
    }
}

/// Every knob of a training run. Defaults are the published settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: FusionKind,
    pub modalities: Vec<Modality>,
    pub leader: Modality,
    pub fold: FoldSelection,
    pub seeds: Vec<u64>,
    pub fold_seed: u64,
    pub window: usize,
    pub hop: usize,
    pub batch: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub patience: u32,
    pub factor: f64,
    pub warmup_epochs: u32,
    pub max_epoch: u32,
    pub early_stop: u32,
    pub monitor: Monitor,
    pub audio_patch: usize,
    pub backbone_channels: Vec<usize>,
    pub tcn_levels: usize,
    pub tcn_kernel: usize,
    pub tcn_channels: usize,
    pub dropout: f64,
    pub embed_dim: usize,
    pub attn_dim: usize,
    pub fusion_dim: usize,
    pub linguistic_dim: usize,
    pub store: PathBuf,
    pub folds_file: PathBuf,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: FusionKind::Can,
            modalities: vec![Modality::Visual, Modality::Audio, Modality::Linguistic],
            leader: Modality::Visual,
            fold: FoldSelection::One(0),
            seeds: vec![0],
            fold_seed: 0,
            window: 300,
            hop: 200,
            batch: 12,
            lr: 1e-5,
            min_lr: 1e-8,
            weight_decay: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            patience: 5,
            factor: 0.1,
            warmup_epochs: 5,
            max_epoch: 100,
            early_stop: 20,
            monitor: Monitor::Mean,
            audio_patch: 8,
            backbone_channels: vec![8, 16, 32],
            tcn_levels: 6,
            tcn_kernel: 3,
            tcn_channels: 64,
            dropout: 0.1,
            embed_dim: 64,
            attn_dim: 32,
            fusion_dim: 64,
            linguistic_dim: 768,
            store: PathBuf::from("store"),
            folds_file: PathBuf::from("store/folds.json"),
            out: PathBuf::from("runs"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "model" => self.model = v.parse()?,
            "modalities" => {
                self.modalities = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "leader" => self.leader = v.parse()?,
            "fold" => self.fold = v.parse()?,
            "seeds" => self.seeds = parse_list(key, v)?,
            "fold_seed" => self.fold_seed = parse(key, v)?,
            "window" => self.window = parse(key, v)?,
            "hop" => self.hop = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "min_lr" => self.min_lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "eps" => self.eps = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "factor" => self.factor = parse(key, v)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, v)?,
            "max_epoch" => self.max_epoch = parse(key, v)?,
            "early_stop" => self.early_stop = parse(key, v)?,
            "monitor" => self.monitor = v.parse()?,
            "audio_patch" => self.audio_patch = parse(key, v)?,
            "backbone_channels" => self.backbone_channels = parse_list(key, v)?,
            "tcn_levels" => self.tcn_levels = parse(key, v)?,
            "tcn_kernel" => self.tcn_kernel = parse(key, v)?,
            "tcn_channels" => self.tcn_channels = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "embed_dim" => self.embed_dim = parse(key, v)?,
            "attn_dim" => self.attn_dim = parse(key, v)?,
            "fusion_dim" => self.fusion_dim = parse(key, v)?,
            "linguistic_dim" => self.linguistic_dim = parse(key, v)?,
            "store" => self.store = PathBuf::from(v),
            "folds_file" => self.folds_file = PathBuf::from(v),
            "out" => self.out = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Every field, one per line, in a form [`RunConfig::from_text`] reads back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("model", self.model.to_string());
        put("modalities", join(&self.modalities));
        put("leader", self.leader.to_string());
        put("fold", self.fold.to_string());
        put("seeds", join(&self.seeds));
        put("fold_seed", self.fold_seed.to_string());
        put("window", self.window.to_string());
        put("hop", self.hop.to_string());
        put("batch", self.batch.to_string());
        put("lr", format!("{:e}", self.lr));
        put("min_lr", format!("{:e}", self.min_lr));
        put("weight_decay", self.weight_decay.to_string());
        put("beta1", self.beta1.to_string());
        put("beta2", self.beta2.to_string());
        put("eps", format!("{:e}", self.eps));
        put("patience", self.patience.to_string());
        put("factor", self.factor.to_string());
        put("warmup_epochs", self.warmup_epochs.to_string());
        put("max_epoch", self.max_epoch.to_string());
        put("early_stop", self.early_stop.to_string());
        put("monitor", self.monitor.name().to_string());
        put("audio_patch", self.audio_patch.to_string());
        put("backbone_channels", join(&self.backbone_channels));
        put("tcn_levels", self.tcn_levels.to_string());
        put("tcn_kernel", self.tcn_kernel.to_string());
        put("tcn_channels", self.tcn_channels.to_string());
        put("dropout", self.dropout.to_string());
        put("embed_dim", self.embed_dim.to_string());
        put("attn_dim", self.attn_dim.to_string());
        put("fusion_dim", self.fusion_dim.to_string());
        put("linguistic_dim", self.linguistic_dim.to_string());
        put("store", self.store.display().to_string());
        put("folds_file", self.folds_file.display().to_string());
        put("out", self.out.display().to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seeds.is_empty() {
            return bad("`seeds` must list at least one seed".into());
        }
        if self.window == 0 || self.hop == 0 || self.hop > self.window {
            return bad(format!(
                "need 0 < hop <= window, got window {} hop {}",
                self.window, self.hop
            ));
        }
        if self.batch == 0 {
            return bad("`batch` must be positive".into());
        }
        if self.audio_patch == 0 {
            return bad("`audio_patch` must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("`dropout` must be in [0, 1), got {}", self.dropout));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("Adam needs beta1, beta2 in [0, 1) and eps > 0".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!(
                "`weight_decay` must be non-negative, got {}",
                self.weight_decay
            ));
        }
        self.scheduler_config().validate()?;
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut m = ModelConfig::new(self.model, self.modalities.clone());
        m.leader = self.leader;
        m.visual = BackboneSpec {
            channels: self.backbone_channels.clone(),
            ..BackboneSpec::visual(self.embed_dim)
        };
        m.audio = BackboneSpec {
            channels: self.backbone_channels.clone(),
            ..BackboneSpec::audio(self.audio_patch, self.embed_dim)
        };
        m.tcn_levels = self.tcn_levels;
        m.tcn_kernel = self.tcn_kernel;
        m.tcn_channels = self.tcn_channels;
        m.dropout = self.dropout;
        m.linguistic_dim = self.linguistic_dim;
        m.embed_dim = self.embed_dim;
        m.attn_dim = self.attn_dim;
        m.fusion_dim = self.fusion_dim;
        m
    }

    pub fn scheduler_config(&self) -> SchedulerConfig {
        SchedulerConfig {
            lr: self.lr,
            min_lr: self.min_lr,
            patience: self.patience,
            factor: self.factor,
            warmup_epochs: self.warmup_epochs,
            early_stop: self.early_stop,
            max_epoch: self.max_epoch,
            groups: 3,
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}
