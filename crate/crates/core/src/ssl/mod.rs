//! Training objectives. Each method consumes one labeled and one unlabeled
//! batch, builds its loss on a [`Graph`], and reports [`Diagnostics`].
//!
//! All pseudo-labels and guessed targets enter the graph as constants, so no
//! gradient flows through a target branch.

mod classical;
mod holistic;
mod primitives;

pub use classical::{
    autoencoder_loss, mean_teacher_loss, pi_model_loss, pseudo_label_loss, supervised_only_loss,
    temporal_ensembling_loss, TemporalEnsemble,
};
pub use holistic::{adamatch_loss, fixmatch_loss, mixmatch_guess, mixmatch_loss};
pub use primitives::{
    adamatch_rectify, confidence_mask, mixup_pair, mixup_with_lambda, rectify_with,
    relative_threshold, sharpen, RECTIFY_EPS,
};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentSpec};
use crate::error::{Error, Result};
use crate::nn::{BackboneParams, BoundBackbone, BoundDecoder, DecoderParams, EmaParams, Mode};
use crate::rng::{self, Stream};
use crate::signal::Protocol;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[serde(rename = "mixmatch")]
    MixMatch,
    #[serde(rename = "fixmatch")]
    FixMatch,
    #[serde(rename = "adamatch")]
    AdaMatch,
    PiModel,
    TemporalEnsembling,
    MeanTeacher,
    ConvAutoencoder,
    PseudoLabel,
    SupervisedOnly,
}

impl Method {
    /// Table order: classical methods, then holistic ones, then the baseline.
    pub const ALL: [Method; 9] = [
        Method::PiModel,
        Method::TemporalEnsembling,
        Method::MeanTeacher,
        Method::ConvAutoencoder,
        Method::PseudoLabel,
        Method::MixMatch,
        Method::FixMatch,
        Method::AdaMatch,
        Method::SupervisedOnly,
    ];

    pub const HOLISTIC: [Method; 3] = [Method::MixMatch, Method::FixMatch, Method::AdaMatch];

    pub fn name(self) -> &'static str {
        match self {
            Method::MixMatch => "mixmatch",
            Method::FixMatch => "fixmatch",
            Method::AdaMatch => "adamatch",
            Method::PiModel => "pi_model",
            Method::TemporalEnsembling => "temporal_ensembling",
            Method::MeanTeacher => "mean_teacher",
            Method::ConvAutoencoder => "conv_autoencoder",
            Method::PseudoLabel => "pseudo_label",
            Method::SupervisedOnly => "supervised_only",
        }
    }

    pub fn is_holistic(self) -> bool {
        Self::HOLISTIC.contains(&self)
    }

    /// Whether the unsupervised term is ramped in by [`warmup_weight`].
    pub fn uses_warmup(self) -> bool {
        !matches!(self, Method::FixMatch | Method::SupervisedOnly)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::Config {
                    path: "methods".into(),
                    msg: format!("unknown method `{s}`; valid methods: {}", valid.join(", ")),
                }
            })
    }
}

/// Per-method hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SslMethodConfig {
    pub method: Method,
    /// Sharpening temperature.
    pub temperature: f64,
    /// MixUp Beta(α, α) parameter.
    pub alpha: f64,
    /// Confidence threshold (absolute for FixMatch, relative for AdaMatch).
    pub tau: f64,
    pub ema_decay: f64,
    pub te_alpha: f64,
    pub unsup_weight_max: f64,
    pub warmup_epochs: usize,
    pub weak: AugmentSpec,
    pub strong: AugmentSpec,
    /// Put weakly augmented (rather than raw) labeled inputs into the MixUp pool.
    pub mixmatch_aug_labeled: bool,
    /// Apply the MixMatch squared error to raw logits instead of probabilities.
    pub mixmatch_logit_mse: bool,
    /// Weakly augment the FixMatch supervised batch.
    pub fixmatch_weak_sup_aug: bool,
    /// Rectify AdaMatch with running class distributions instead of per-batch ones.
    pub adamatch_running_dist: bool,
    pub adamatch_dist_momentum: f64,
}

pub const FIXMATCH_TAU: f64 = 0.9;
pub const ADAMATCH_TAU_SEED: f64 = 0.6;
pub const ADAMATCH_TAU_SEED_IV: f64 = 0.5;

impl SslMethodConfig {
    /// Defaults for `method`; the AdaMatch threshold depends on the dataset protocol.
    pub fn defaults(method: Method, protocol: Protocol) -> Self {
        let tau = match (method, protocol) {
            (Method::AdaMatch, Protocol::Seed) => ADAMATCH_TAU_SEED,
            (Method::AdaMatch, Protocol::SeedIv) => ADAMATCH_TAU_SEED_IV,
            _ => FIXMATCH_TAU,
        };
        SslMethodConfig {
            method,
            temperature: 1.0,
            alpha: 0.75,
            tau,
            ema_decay: 0.999,
            te_alpha: 0.6,
            unsup_weight_max: 1.0,
            warmup_epochs: 10,
            weak: AugmentSpec::weak(),
            strong: AugmentSpec::strong(),
            mixmatch_aug_labeled: true,
            mixmatch_logit_mse: false,
            fixmatch_weak_sup_aug: false,
            adamatch_running_dist: false,
            adamatch_dist_momentum: 0.999,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("ssl_config", msg));
        if !(self.temperature > 0.0) {
            return bad(format!("temperature {} must be > 0", self.temperature));
        }
        if !(self.alpha > 0.0) {
            return bad(format!("alpha {} must be > 0", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau {} outside [0, 1]", self.tau));
        }
        for (name, v) in [("ema_decay", self.ema_decay), ("te_alpha", self.te_alpha)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} {v} outside (0, 1)"));
            }
        }
        if !(0.0..1.0).contains(&self.adamatch_dist_momentum) {
            return bad("adamatch_dist_momentum outside [0, 1)".into());
        }
        if !(self.unsup_weight_max >= 0.0) {
            return bad("unsup_weight_max must be >= 0".into());
        }
        augment::validate_pair(&self.weak, &self.strong)
    }
}

/// Unsupervised-loss weight: `max · min(1, epoch / warmup_epochs)`, except
/// FixMatch which uses a constant 1.
pub fn warmup_weight(epoch: usize, cfg: &SslMethodConfig) -> f64 {
    match cfg.method {
        Method::FixMatch => 1.0,
        _ if cfg.warmup_epochs == 0 => cfg.unsup_weight_max,
        _ => cfg.unsup_weight_max * (epoch as f64 / cfg.warmup_epochs as f64).min(1.0),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    /// `(B, C, L)`
    pub x: Tensor,
    /// One-hot `(B, k)`
    pub y: Tensor,
    pub ids: Vec<u32>,
}

impl LabeledBatch {
    pub fn new(x: Tensor, labels: &[usize], k: usize, ids: Vec<u32>) -> Result<Self> {
        if x.rank() != 3 || x.shape()[0] != labels.len() || ids.len() != labels.len() {
            return Err(Error::shape("labeled_batch", x.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= k) {
            return Err(Error::invalid(
                "labeled_batch",
                format!("label {bad} >= {k}"),
            ));
        }
        Ok(LabeledBatch {
            x,
            y: Tensor::one_hot(labels, k),
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.y.last_dim()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledBatch {
    pub x: Tensor,
    pub ids: Vec<u32>,
}

impl UnlabeledBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// The student network as seen by a loss: parameters, their graph handles
/// and the forward mode (train during optimization).
pub struct Model<'a> {
    pub params: &'a mut BackboneParams,
    pub bound: BoundBackbone,
    pub mode: Mode,
}

impl<'a> Model<'a> {
    pub fn new(g: &mut Graph, params: &'a mut BackboneParams, mode: Mode) -> Self {
        let bound = params.bind(g);
        Model {
            params,
            bound,
            mode,
        }
    }

    pub fn logits<R: Rng + ?Sized>(
        &mut self,
        g: &mut Graph,
        x: &Tensor,
        rng: &mut R,
    ) -> Result<Var> {
        let xv = g.constant(x.clone());
        self.params.forward(g, &self.bound, xv, self.mode, rng)
    }
}

/// Independent random streams used while building one step's loss.
#[derive(Clone, Debug)]
pub struct StepRngs {
    pub augment: ChaCha8Rng,
    pub dropout: ChaCha8Rng,
    pub mixup: ChaCha8Rng,
}

impl StepRngs {
    pub fn from_seed(seed: u64) -> Self {
        StepRngs {
            augment: rng::stream(seed, Stream::Augment),
            dropout: rng::stream(seed, Stream::Dropout),
            mixup: rng::stream(seed, Stream::Mixup),
        }
    }
}

/// Per-step scalars reported to the trainer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub sup_loss: f64,
    pub unsup_loss: f64,
    pub weight: f64,
    pub mask_rate: Option<f64>,
    pub rel_threshold: Option<f64>,
    pub mixed_labeled: Option<usize>,
    pub mixed_unlabeled: Option<usize>,
}

pub struct StepLoss {
    pub total: Var,
    pub diagnostics: Diagnostics,
    /// Graph nodes holding unsupervised targets; all are constants.
    pub targets: Vec<Var>,
    /// Decoder handles when the method trains one.
    pub decoder: Option<BoundDecoder>,
}

impl StepLoss {
    pub(crate) fn assemble(
        g: &mut Graph,
        sup: Var,
        unsup: Var,
        weight: f64,
    ) -> Result<(Var, Diagnostics)> {
        let scaled = g.scale(unsup, weight);
        let total = g.add(sup, scaled)?;
        let diag = Diagnostics {
            sup_loss: g.value(sup).item(),
            unsup_loss: g.value(unsup).item(),
            weight,
            ..Diagnostics::default()
        };
        Ok((total, diag))
    }
}

/// Running per-class distributions for the AdaMatch EMA option.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassDistributions {
    pub momentum: f64,
    pub labeled: Option<Vec<f64>>,
    pub unlabeled: Option<Vec<f64>>,
}

impl ClassDistributions {
    pub(crate) fn update(&mut self, labeled: &[f64], unlabeled: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let m = self.momentum;
        let blend = |slot: &mut Option<Vec<f64>>, batch: &[f64]| {
            let next = match slot.take() {
                None => batch.to_vec(),
                Some(r) => r
                    .iter()
                    .zip(batch)
                    .map(|(r, b)| m * r + (1.0 - m) * b)
                    .collect(),
            };
            *slot = Some(next.clone());
            next
        };
        (
            blend(&mut self.labeled, labeled),
            blend(&mut self.unlabeled, unlabeled),
        )
    }
}

/// State a method carries across steps.
#[derive(Clone, Debug, Default)]
pub struct MethodState {
    pub ema: Option<EmaParams>,
    pub ensemble: Option<TemporalEnsemble>,
    pub decoder: Option<DecoderParams>,
    pub class_dist: Option<ClassDistributions>,
}

impl MethodState {
    /// `sample_ids` must cover every id that can appear in a batch.
    pub fn new(
        cfg: &SslMethodConfig,
        backbone: &BackboneParams,
        sample_ids: &[u32],
        seed: u64,
    ) -> Result<Self> {
        let mut st = MethodState::default();
        match cfg.method {
            Method::MeanTeacher => st.ema = Some(EmaParams::new(backbone, cfg.ema_decay)?),
            Method::TemporalEnsembling => {
                st.ensemble = Some(TemporalEnsemble::new(
                    cfg.te_alpha,
                    backbone.arch.num_classes,
                    sample_ids,
                )?)
            }
            Method::ConvAutoencoder => {
                st.decoder = Some(DecoderParams::init(&backbone.arch, seed)?)
            }
            Method::AdaMatch if cfg.adamatch_running_dist => {
                st.class_dist = Some(ClassDistributions {
                    momentum: cfg.adamatch_dist_momentum,
                    labeled: None,
                    unlabeled: None,
                })
            }
            _ => {}
        }
        Ok(st)
    }

    /// Called once after every optimizer step.
    pub fn after_step(&mut self, student: &BackboneParams) {
        if let Some(ema) = &mut self.ema {
            ema.update(student);
        }
    }

    /// Called once at the end of every epoch.
    pub fn end_epoch(&mut self) {
        if let Some(ens) = &mut self.ensemble {
            ens.end_epoch();
        }
    }
}

/// Builds the configured method's loss for one step.
#[allow(clippy::too_many_arguments)]
pub fn compute_loss(
    g: &mut Graph,
    model: &mut Model<'_>,
    state: &mut MethodState,
    labeled: &LabeledBatch,
    unlabeled: &UnlabeledBatch,
    cfg: &SslMethodConfig,
    epoch: usize,
    rngs: &mut StepRngs,
) -> Result<StepLoss> {
    match cfg.method {
        Method::MixMatch => mixmatch_loss(g, model, labeled, unlabeled, cfg, epoch, rngs),
        Method::FixMatch => fixmatch_loss(g, model, labeled, unlabeled, cfg, rngs),
        Method::AdaMatch => adamatch_loss(
            g,
            model,
            labeled,
            unlabeled,
            cfg,
            epoch,
            rngs,
            state.class_dist.as_mut(),
        ),
        Method::PiModel => pi_model_loss(g, model, labeled, unlabeled, cfg, epoch, rngs),
        Method::TemporalEnsembling => {
            let ens = state
                .ensemble
                .as_mut()
                .ok_or_else(|| Error::invalid("temporal_ensembling", "missing ensemble state"))?;
            temporal_ensembling_loss(g, model, ens, labeled, unlabeled, cfg, epoch, rngs)
        }
        Method::MeanTeacher => {
            let ema = state
                .ema
                .as_mut()
                .ok_or_else(|| Error::invalid("mean_teacher", "missing teacher state"))?;
            mean_teacher_loss(g, model, ema, labeled, unlabeled, cfg, epoch, rngs)
        }
        Method::ConvAutoencoder => {
            let dec = state
                .decoder
                .as_mut()
                .ok_or_else(|| Error::invalid("conv_autoencoder", "missing decoder"))?;
            autoencoder_loss(g, model, dec, labeled, unlabeled, cfg, epoch, rngs)
        }
        Method::PseudoLabel => pseudo_label_loss(g, model, labeled, unlabeled, cfg, epoch, rngs),
        Method::SupervisedOnly => supervised_only_loss(g, model, labeled, rngs),
    }
}

pub(crate) fn check_batches(
    op: &'static str,
    labeled: &LabeledBatch,
    unlabeled: &UnlabeledBatch,
) -> Result<()> {
    if labeled.is_empty() {
        return Err(Error::invalid(op, "empty labeled batch"));
    }
    if labeled.len() != unlabeled.len() {
        return Err(Error::invalid(
            op,
            format!(
                "labeled batch has {} rows, unlabeled has {}",
                labeled.len(),
                unlabeled.len()
            ),
        ));
    }
    if labeled.x.shape()[1..] != unlabeled.x.shape()[1..] {
        return Err(Error::shape(op, labeled.x.shape(), unlabeled.x.shape()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
        let err = "nope".parse::<Method>().unwrap_err().to_string();
        assert!(err.contains("adamatch"), "{err}");
    }

    #[test]
    fn warmup_ramp() {
        let cfg = SslMethodConfig::defaults(Method::MixMatch, Protocol::Seed);
        assert_eq!(warmup_weight(0, &cfg), 0.0);
        assert_eq!(warmup_weight(5, &cfg), 0.5);
        assert_eq!(warmup_weight(10, &cfg), 1.0);
        assert_eq!(warmup_weight(25, &cfg), 1.0);
        let fix = SslMethodConfig::defaults(Method::FixMatch, Protocol::Seed);
        assert_eq!(warmup_weight(0, &fix), 1.0);
    }

    #[test]
    fn default_thresholds() {
        assert_eq!(
            SslMethodConfig::defaults(Method::FixMatch, Protocol::Seed).tau,
            0.9
        );
        assert_eq!(
            SslMethodConfig::defaults(Method::FixMatch, Protocol::SeedIv).tau,
            0.9
        );
        assert_eq!(
            SslMethodConfig::defaults(Method::AdaMatch, Protocol::Seed).tau,
            0.6
        );
        assert_eq!(
            SslMethodConfig::defaults(Method::AdaMatch, Protocol::SeedIv).tau,
            0.5
        );
    }

    #[test]
    fn config_validation() {
        let mut cfg = SslMethodConfig::defaults(Method::MixMatch, Protocol::Seed);
        assert!(cfg.validate().is_ok());
        cfg.temperature = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = SslMethodConfig::defaults(Method::FixMatch, Protocol::Seed);
        cfg.tau = 1.2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn labeled_batch_rejects_bad_labels() {
        let x = Tensor::zeros(&[2, 5, 4]);
        assert!(LabeledBatch::new(x.clone(), &[0, 3], 3, vec![0, 1]).is_err());
        let b = LabeledBatch::new(x, &[0, 2], 3, vec![0, 1]).unwrap();
        assert_eq!(b.y.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }
}
