//! Consistency-regularization baselines (Π-model, temporal ensembling, mean
//! teacher), pseudo-labeling, the convolutional autoencoder and the
//! supervised-only reference.

use std::collections::BTreeMap;

use crate::augment::augment;
use crate::error::{Error, Result};
use crate::nn::{DecoderParams, EmaParams};
use crate::tensor::{softmax_rows, Graph, Tensor, Var};

use super::{
    check_batches, warmup_weight, LabeledBatch, Model, SslMethodConfig, StepLoss, StepRngs,
    UnlabeledBatch,
};

fn joint_inputs(labeled: &LabeledBatch, unlabeled: &UnlabeledBatch) -> Result<Tensor> {
    Tensor::concat_rows(&[&labeled.x, &unlabeled.x])
}

fn supervised_head(g: &mut Graph, logits: Var, labeled: &LabeledBatch) -> Result<Var> {
    let l = g.slice(logits, 0, 0, labeled.len())?;
    let y = g.constant(labeled.y.clone());
    g.cross_entropy(l, y)
}

fn finish(g: &mut Graph, sup: Var, unsup: Var, weight: f64, targets: Vec<Var>) -> Result<StepLoss> {
    let (total, diagnostics) = StepLoss::assemble(g, sup, unsup, weight)?;
    Ok(StepLoss {
        total,
        diagnostics,
        targets,
        decoder: None,
    })
}

/// Two independently augmented passes; squared error between their softmax
/// outputs with the second pass as a constant target.
pub fn pi_model_loss(
    g: &mut Graph,
    model: &mut Model<'_>,
    labeled: &LabeledBatch,
    unlabeled: &UnlabeledBatch,
    cfg: &SslMethodConfig,
    epoch: usize,
    rngs: &mut StepRngs,
) -> Result<StepLoss> {
    check_batches("pi_model", labeled, unlabeled)?;
    let x = joint_inputs(labeled, unlabeled)?;
    let v1 = augment(&x, &cfg.weak, &mut rngs.augment)?;
    let v2 = augment(&x, &cfg.weak, &mut rngs.augment)?;
    let l1 = model.logits(g, &v1, &mut rngs.dropout)?;
    let l2 = model.logits(g, &v2, &mut rngs.dropout)?;
    let sup = supervised_head(g, l1, labeled)?;
    let p1 = g.softmax(l1);
    let target = g.constant(softmax_rows(g.value(l2)));
    let unsup = g.mse(p1, target)?;
    finish(g, sup, unsup, warmup_weight(epoch, cfg), vec![target])
}

/// Per-sample exponential moving average of past predictions.
///
/// Predictions made during an epoch are held back and folded in by
/// [`TemporalEnsemble::end_epoch`]; each sample keeps its own update count
/// for bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalEnsemble {
    pub alpha: f64,
    pub num_classes: usize,
    z: BTreeMap<u32, (Vec<f64>, u32)>,
    pending: BTreeMap<u32, Vec<f64>>,
}

impl TemporalEnsemble {
    pub fn new(alpha: f64, num_classes: usize, ids: &[u32]) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::invalid(
                "temporal_ensembling",
                format!("alpha {alpha} outside [0, 1)"),
            ));
        }
        Ok(TemporalEnsemble {
            alpha,
            num_classes,
            z: ids
                .iter()
                .map(|&i| (i, (vec![0.0; num_classes], 0)))
                .collect(),
            pending: BTreeMap::new(),
        })
    }

    /// Bias-corrected target `Z_i / (1 − α^{t_i})`; `None` before the first fold.
    pub fn target(&self, id: u32) -> Result<Option<Vec<f64>>> {
        let (z, t) = self.z.get(&id).ok_or_else(|| {
            Error::invalid("temporal_ensembling", format!("unknown sample id {id}"))
        })?;
        if *t == 0 {
            return Ok(None);
        }
        let c = 1.0 - self.alpha.powi(*t as i32);
        Ok(Some(z.iter().map(|v| v / c).collect()))
    }

    pub fn update_count(&self, id: u32) -> Option<u32> {
        self.z.get(&id).map(|(_, t)| *t)
    }

    /// Stores this epoch's prediction for `id`; a later record replaces an earlier one.
    pub fn record(&mut self, id: u32, probs: &[f64]) -> Result<()> {
        if !self.z.contains_key(&id) {
            return Err(Error::invalid(
                "temporal_ensembling",
                format!("unknown sample id {id}"),
            ));
        }
        self.pending.insert(id, probs.to_vec());
        Ok(())
    }

    /// `Z ← αZ + (1 − α)z` for every sample seen this epoch.
    pub fn end_epoch(&mut self) {
        let a = self.alpha;
        for (id, p) in std::mem::take(&mut self.pending) {
            let (z, t) = self.z.get_mut(&id).expect("recorded ids are known");
            for (zv, pv) in z.iter_mut().zip(&p) {
                *zv = a * *zv + (1.0 - a) * pv;
            }
            *t += 1;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn temporal_ensembling_loss(
    g: &mut Graph,
    model: &mut Model<'_>,
    ensemble: &mut TemporalEnsemble,
    labeled: &LabeledBatch,
    unlabeled: &UnlabeledBatch,
    cfg: &SslMethodConfig,
    epoch: usize,
    rngs: &mut StepRngs,
) -> Result<StepLoss> {
    check_batches("temporal_ensembling", labeled, unlabeled)?;
    let x = augment(
        &joint_inputs(labeled, unlabeled)?,
        &cfg.weak,
        &mut rngs.augment,
    )?;
    let logits = model.logits(g, &x, &mut rngs.dropout)?;
    let sup = supervised_head(g, logits, labeled)?;
    let probs = g.softmax(logits);
    let current = g.value(probs).clone();
    let k = current.last_dim();
    let ids: Vec<u32> = labeled.ids.iter().chain(&unlabeled.ids).copied().collect();
    let mut target = Vec::with_capacity(current.len());
    for (id, row) in ids.iter().zip(current.rows()) {
        match ensemble.target(*id)? {
            Some(t) => target.extend(t),
            None => target.extend_from_slice(row),
        }
    }
    for (id, row) in ids.iter().zip(current.rows()) {
        ensemble.record(*id, row)?;
    }
    let target = g.constant(Tensor::new(vec![ids.len(), k], target)?);
    let unsup = g.mse(probs, target)?;
    finish(g, sup, unsup, warmup_weight(epoch, cfg), vec![target])
}

/// Student/teacher consistency; the teacher is an EMA of the student and is
/// updated by the caller after each optimizer step.
#[allow(clippy::too_many_arguments)]
pub fn mean_teacher_loss(
    g: &mut Graph,
    model: &mut Model<'_>,
    teacher: &mut EmaParams,
    labeled: &LabeledBatch,
    unlabeled: &UnlabeledBatch,
    cfg: &SslMethodConfig,
    epoch: usize,
    rngs: &mut StepRngs,
) -> Result<StepLoss> {
    check_batches("mean_teacher", labeled, unlabeled)?;
    let x = joint_inputs(labeled, unlabeled)?;
    let vs = augment(&x, &cfg.weak, &mut rngs.augment)?;
    let vt = augment(&x, &cfg.weak, &mut rngs.augment)?;
    let logits = model.logits(g, &vs, &mut rngs.dropout)?;
    let sup = supervised_head(g, logits, labeled)?;

    let tb = teacher.shadow.bind_frozen(g);
    let xt = g.constant(vt);
    let tl = teacher
        .shadow
        .forward(g, &tb, xt, model.mode, &mut rngs.dropout)?;
    let target = g.constant(softmax_rows(g.value(tl)));
    let probs = g.softmax(logits);
    let unsup = g.mse(probs, target)?;
    finish(g, sup, unsup, warmup_weight(epoch, cfg), vec![target])
}

/// Online pseudo-labeling on unaugmented inputs: the current argmax of each
/// unlabeled prediction is its hard target.
pub fn pseudo_label_loss(
    g: &mut Graph,
    model: &mut Model<'_>,
    labeled: &LabeledBatch,
    unlabeled: &UnlabeledBatch,
    cfg: &SslMethodConfig,
    epoch: usize,
    rngs: &mut StepRngs,
) -> Result<StepLoss> {
    check_batches("pseudo_label", labeled, unlabeled)?;
    let x = joint_inputs(labeled, unlabeled)?;
    let logits = model.logits(g, &x, &mut rngs.dropout)?;
    let sup = supervised_head(g, logits, labeled)?;
    let b = labeled.len();
    let lu = g.slice(logits, 0, b, b + unlabeled.len())?;
    let hard = Tensor::one_hot(&g.value(lu).argmax_rows(), labeled.num_classes());
    let target = g.constant(hard);
    let unsup = g.cross_entropy(lu, target)?;
    finish(g, sup, unsup, warmup_weight(epoch, cfg), vec![target])
}

/// Reconstruction of both batches through the shared encoder plus
/// classification of the labeled codes.
#[allow(clippy::too_many_arguments)]
pub fn autoencoder_loss(
    g: &mut Graph,
    model: &mut Model<'_>,
    decoder: &mut DecoderParams,
    labeled: &LabeledBatch,
    unlabeled: &UnlabeledBatch,
    cfg: &SslMethodConfig,
    epoch: usize,
    rngs: &mut StepRngs,
) -> Result<StepLoss> {
    check_batches("conv_autoencoder", labeled, unlabeled)?;
    let (b, n) = (labeled.len(), unlabeled.len());
    let x = joint_inputs(labeled, unlabeled)?;
    let xv = g.constant(x);
    let z = model.params.encode(g, &model.bound, xv, model.mode)?;
    let db = decoder.bind(g);
    let recon = decoder.forward(g, &db, z, model.mode)?;
    if g.shape(recon) != g.shape(xv) {
        return Err(Error::shape(
            "conv_autoencoder",
            g.shape(xv),
            g.shape(recon),
        ));
    }
    let rl = g.slice(recon, 0, 0, b)?;
    let ru = g.slice(recon, 0, b, b + n)?;
    let xl = g.constant(labeled.x.clone());
    let xu = g.constant(unlabeled.x.clone());
    let el = g.mse(rl, xl)?;
    let eu = g.mse(ru, xu)?;
    let unsup = g.add(el, eu)?;

    let zl = g.slice(z, 0, 0, b)?;
    let logits = model
        .params
        .classify(g, &model.bound, zl, model.mode, &mut rngs.dropout)?;
    let y = g.constant(labeled.y.clone());
    let sup = g.cross_entropy(logits, y)?;
    let mut out = finish(g, sup, unsup, warmup_weight(epoch, cfg), vec![xl, xu])?;
    out.decoder = Some(db);
    Ok(out)
}

/// Cross-entropy on the labeled batch only.
pub fn supervised_only_loss(
    g: &mut Graph,
    model: &mut Model<'_>,
    labeled: &LabeledBatch,
    rngs: &mut StepRngs,
) -> Result<StepLoss> {
    if labeled.is_empty() {
        return Err(Error::invalid("supervised_only", "empty labeled batch"));
    }
    let logits = model.logits(g, &labeled.x, &mut rngs.dropout)?;
    let sup = supervised_head(g, logits, labeled)?;
    let zero = g.constant(Tensor::scalar(0.0));
    finish(g, sup, zero, 0.0, Vec::new())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{AugmentSpec, Strength};
    use crate::nn::{init_backbone, Mode};
    use crate::signal::Protocol;
    use crate::ssl::{compute_loss, Method, MethodState};
    use rand_distr::{Distribution, Normal};

    fn batches(b: usize, k: usize, len: usize) -> (LabeledBatch, UnlabeledBatch) {
        let mut rng = crate::rng::stream(4, crate::rng::Stream::Synth);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut draw = |n: usize| {
            Tensor::new(
                vec![n, 5, len],
                (0..n * 5 * len).map(|_| normal.sample(&mut rng)).collect(),
            )
            .unwrap()
        };
        let labels: Vec<usize> = (0..b).map(|i| i % k).collect();
        let l = LabeledBatch::new(draw(b), &labels, k, (0..b as u32).collect()).unwrap();
        let u = UnlabeledBatch {
            x: draw(b),
            ids: (100..100 + b as u32).collect(),
        };
        (l, u)
    }

    fn ids(l: &LabeledBatch, u: &UnlabeledBatch) -> Vec<u32> {
        l.ids.iter().chain(&u.ids).copied().collect()
    }

    #[test]
    fn pi_model_consistency_vanishes_without_noise() {
        let (l, u) = batches(4, 2, 8);
        let mut params = init_backbone(0, 5, 8, 2).unwrap();
        let mut cfg = SslMethodConfig::defaults(Method::PiModel, Protocol::Seed);
        cfg.weak = AugmentSpec::new(0.5, 0.0, Strength::Weak).unwrap();
        let mut g = Graph::new();
        let mut model = Model::new(&mut g, &mut params, Mode::Eval);
        let loss = pi_model_loss(
            &mut g,
            &mut model,
            &l,
            &u,
            &cfg,
            5,
            &mut StepRngs::from_seed(0),
        )
        .unwrap();
        assert_eq!(loss.diagnostics.unsup_loss, 0.0);
    }

    #[test]
    fn temporal_ensemble_bias_correction() {
        let mut ens = TemporalEnsemble::new(0.6, 2, &[7]).unwrap();
        assert_eq!(ens.target(7).unwrap(), None);
        ens.record(7, &[1.0, 0.0]).unwrap();
        ens.end_epoch();
        let t = ens.target(7).unwrap().unwrap();
        assert!((t[0] - 1.0).abs() < 1e-12 && t[1].abs() < 1e-12);
        ens.record(7, &[0.0, 1.0]).unwrap();
        ens.end_epoch();
        let t = ens.target(7).unwrap().unwrap();
        // Z = 0.6·0.4·(1,0) + 0.4·(0,1), corrected by 1 − 0.36.
        assert!((t[0] - 0.24 / 0.64).abs() < 1e-12);
        assert!((t[1] - 0.40 / 0.64).abs() < 1e-12);
        assert!(ens.target(99).is_err());
        assert!(ens.record(99, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn temporal_ensemble_counts_are_per_sample() {
        let mut ens = TemporalEnsemble::new(0.6, 2, &[1, 2]).unwrap();
        ens.record(1, &[0.5, 0.5]).unwrap();
        ens.end_epoch();
        assert_eq!(ens.update_count(1), Some(1));
        assert_eq!(ens.update_count(2), Some(0));
    }

    #[test]
    fn pseudo_label_matches_true_label_ce_when_predictions_are_right() {
        // The unlabeled batch repeats the labeled one, so the argmax targets
        // equal the true labels whenever the model classifies it correctly.
        let (l, _) = batches(4, 2, 8);
        let mut params = init_backbone(0, 5, 8, 2).unwrap();
        let pred = params.predict(&l.x).unwrap().argmax_rows();
        let l = LabeledBatch::new(l.x.clone(), &pred, 2, l.ids.clone()).unwrap();
        let u = UnlabeledBatch {
            x: l.x.clone(),
            ids: vec![10, 11, 12, 13],
        };
        let cfg = SslMethodConfig::defaults(Method::PseudoLabel, Protocol::Seed);
        let mut g = Graph::new();
        let mut model = Model::new(&mut g, &mut params, Mode::Eval);
        let loss = pseudo_label_loss(
            &mut g,
            &mut model,
            &l,
            &u,
            &cfg,
            10,
            &mut StepRngs::from_seed(0),
        )
        .unwrap();
        assert!((loss.diagnostics.unsup_loss - loss.diagnostics.sup_loss).abs() < 1e-12);
    }

    #[test]
    fn every_method_zero_weight_and_stop_gradient() {
        let (l, u) = batches(4, 3, 8);
        for method in Method::ALL {
            let mut params = init_backbone(1, 5, 8, 3).unwrap();
            let cfg = SslMethodConfig::defaults(method, Protocol::Seed);
            let mut state = MethodState::new(&cfg, &params, &ids(&l, &u), 0).unwrap();
            let mut g = Graph::new();
            let mut model = Model::new(&mut g, &mut params, Mode::Train);
            let epoch = if method == Method::FixMatch { 3 } else { 0 };
            let loss = compute_loss(
                &mut g,
                &mut model,
                &mut state,
                &l,
                &u,
                &cfg,
                epoch,
                &mut StepRngs::from_seed(9),
            )
            .unwrap();
            if method.uses_warmup() || method == Method::SupervisedOnly {
                assert_eq!(
                    g.value(loss.total).item(),
                    loss.diagnostics.sup_loss,
                    "{method}"
                );
            }
            let grads = g.backward(loss.total).unwrap();
            for t in &loss.targets {
                assert!(grads.get(*t).is_none(), "{method}");
            }
            assert_eq!(loss.decoder.is_some(), method == Method::ConvAutoencoder);
        }
    }

    #[test]
    fn supervised_only_rejects_empty_batch() {
        let l = LabeledBatch::new(Tensor::zeros(&[0, 5, 8]), &[], 2, vec![]).unwrap();
        let mut params = init_backbone(1, 5, 8, 2).unwrap();
        let mut g = Graph::new();
        let mut model = Model::new(&mut g, &mut params, Mode::Train);
        assert!(supervised_only_loss(&mut g, &mut model, &l, &mut StepRngs::from_seed(0)).is_err());
    }
}
