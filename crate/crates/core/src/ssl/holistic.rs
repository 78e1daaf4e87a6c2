//! MixMatch, FixMatch and AdaMatch.

use rand::seq::SliceRandom;
use rand_distr::{Beta, Distribution};

use crate::augment::augment;
use crate::error::{Error, Result};
use crate::tensor::{softmax_rows, Graph, Tensor, Var};

use super::primitives::{column_means, confidence_mask, rectify_with, relative_threshold, sharpen};
use super::{
    check_batches, warmup_weight, ClassDistributions, LabeledBatch, Model, SslMethodConfig,
    StepLoss, StepRngs, UnlabeledBatch,
};

/// Label guess for an unlabeled batch: the sharpened average of the model's
/// predictions on a weak and a strong view. Returned as a plain tensor.
pub fn mixmatch_guess(
    g: &mut Graph,
    model: &mut Model<'_>,
    weak_view: &Tensor,
    strong_view: &Tensor,
    temperature: f64,
    rngs: &mut StepRngs,
) -> Result<Tensor> {
    let lw = model.logits(g, weak_view, &mut rngs.dropout)?;
    let ls = model.logits(g, strong_view, &mut rngs.dropout)?;
    let pw = softmax_rows(g.value(lw));
    let ps = softmax_rows(g.value(ls));
    let avg: Vec<f64> = pw
        .data()
        .iter()
        .zip(ps.data())
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    sharpen(&Tensor::new(pw.shape().to_vec(), avg)?, temperature)
}

/// Mixes every row of `x` with row `perm[i]` using one shared `λ'`.
fn mix_rows(x: &Tensor, perm: &[usize], lp: f64) -> Tensor {
    let other = x.select_rows(perm);
    let data = x
        .data()
        .iter()
        .zip(other.data())
        .map(|(a, b)| lp * a + (1.0 - lp) * b)
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn mixmatch_loss(
    g: &mut Graph,
    model: &mut Model<'_>,
    labeled: &LabeledBatch,
    unlabeled: &UnlabeledBatch,
    cfg: &SslMethodConfig,
    epoch: usize,
    rngs: &mut StepRngs,
) -> Result<StepLoss> {
    mixmatch_impl(g, model, labeled, unlabeled, cfg, epoch, rngs, None)
}

/// `forced_lambda` replaces the Beta draw; the pool permutation is still drawn.
#[allow(clippy::too_many_arguments)]
pub(crate) fn mixmatch_impl(
    g: &mut Graph,
    model: &mut Model<'_>,
    labeled: &LabeledBatch,
    unlabeled: &UnlabeledBatch,
    cfg: &SslMethodConfig,
    epoch: usize,
    rngs: &mut StepRngs,
    forced_lambda: Option<f64>,
) -> Result<StepLoss> {
    check_batches("mixmatch", labeled, unlabeled)?;
    let b = labeled.len();
    let xl = if cfg.mixmatch_aug_labeled {
        augment(&labeled.x, &cfg.weak, &mut rngs.augment)?
    } else {
        labeled.x.clone()
    };
    let uw = augment(&unlabeled.x, &cfg.weak, &mut rngs.augment)?;
    let us = augment(&unlabeled.x, &cfg.strong, &mut rngs.augment)?;
    let guess = mixmatch_guess(g, model, &uw, &us, cfg.temperature, rngs)?;

    let pool_x = Tensor::concat_rows(&[&xl, &uw, &us])?;
    let pool_y = Tensor::concat_rows(&[&labeled.y, &guess, &guess])?;
    let mut perm: Vec<usize> = (0..3 * b).collect();
    perm.shuffle(&mut rngs.mixup);
    let lambda = match forced_lambda {
        Some(l) => l,
        None => Beta::new(cfg.alpha, cfg.alpha)
            .map_err(|e| Error::invalid("mixmatch", e.to_string()))?
            .sample(&mut rngs.mixup),
    };
    let lp = lambda.max(1.0 - lambda);
    let mixed_x = mix_rows(&pool_x, &perm, lp);
    let mixed_y = mix_rows(&pool_y, &perm, lp);

    let logits = model.logits(g, &mixed_x, &mut rngs.dropout)?;
    let logits_l = g.slice(logits, 0, 0, b)?;
    let logits_u = g.slice(logits, 0, b, 3 * b)?;
    let y_l = g.constant(mixed_y.select_rows(&(0..b).collect::<Vec<_>>()));
    let y_u = g.constant(mixed_y.select_rows(&(b..3 * b).collect::<Vec<_>>()));
    let sup = g.cross_entropy(logits_l, y_l)?;
    let pred_u = if cfg.mixmatch_logit_mse {
        logits_u
    } else {
        g.softmax(logits_u)
    };
    let unsup = g.mse(pred_u, y_u)?;

    let (total, mut diagnostics) = StepLoss::assemble(g, sup, unsup, warmup_weight(epoch, cfg))?;
    diagnostics.mixed_labeled = Some(b);
    diagnostics.mixed_unlabeled = Some(2 * b);
    Ok(StepLoss {
        total,
        diagnostics,
        targets: vec![y_l, y_u],
        decoder: None,
    })
}

/// Shared tail of FixMatch and AdaMatch: masked cross-entropy of strong-view
/// logits against hard pseudo-labels.
fn masked_pseudo_ce(
    g: &mut Graph,
    strong_logits: Var,
    q: &Tensor,
    mask: &[f64],
) -> Result<(Var, Var)> {
    let k = q.last_dim();
    let hard = Tensor::one_hot(&q.argmax_rows(), k);
    let target = g.constant(hard);
    let rows = g.cross_entropy_rows(strong_logits, target)?;
    let m = g.constant(Tensor::from_vec(mask.to_vec()));
    let masked = g.mul(rows, m)?;
    Ok((g.mean(masked), target))
}

fn mask_rate(mask: &[f64]) -> f64 {
    mask.iter().sum::<f64>() / mask.len().max(1) as f64
}

/// One concatenated forward pass over labeled, weak-unlabeled and
/// strong-unlabeled inputs; returns the three logit blocks.
fn three_way_logits(
    g: &mut Graph,
    model: &mut Model<'_>,
    xl: &Tensor,
    uw: &Tensor,
    us: &Tensor,
    rngs: &mut StepRngs,
) -> Result<(Var, Var, Var)> {
    let (b, n) = (xl.shape()[0], uw.shape()[0]);
    let all = Tensor::concat_rows(&[xl, uw, us])?;
    let logits = model.logits(g, &all, &mut rngs.dropout)?;
    Ok((
        g.slice(logits, 0, 0, b)?,
        g.slice(logits, 0, b, b + n)?,
        g.slice(logits, 0, b + n, b + 2 * n)?,
    ))
}

pub fn fixmatch_loss(
    g: &mut Graph,
    model: &mut Model<'_>,
    labeled: &LabeledBatch,
    unlabeled: &UnlabeledBatch,
    cfg: &SslMethodConfig,
    rngs: &mut StepRngs,
) -> Result<StepLoss> {
    check_batches("fixmatch", labeled, unlabeled)?;
    let xl = if cfg.fixmatch_weak_sup_aug {
        augment(&labeled.x, &cfg.weak, &mut rngs.augment)?
    } else {
        labeled.x.clone()
    };
    let uw = augment(&unlabeled.x, &cfg.weak, &mut rngs.augment)?;
    let us = augment(&unlabeled.x, &cfg.strong, &mut rngs.augment)?;
    let (logits_l, logits_w, logits_s) = three_way_logits(g, model, &xl, &uw, &us, rngs)?;

    let y = g.constant(labeled.y.clone());
    let sup = g.cross_entropy(logits_l, y)?;
    let q = softmax_rows(g.value(logits_w));
    let mask = confidence_mask(&q, cfg.tau);
    let (unsup, target) = masked_pseudo_ce(g, logits_s, &q, &mask)?;

    let (total, mut diagnostics) = StepLoss::assemble(g, sup, unsup, 1.0)?;
    diagnostics.mask_rate = Some(mask_rate(&mask));
    Ok(StepLoss {
        total,
        diagnostics,
        targets: vec![target],
        decoder: None,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn adamatch_loss(
    g: &mut Graph,
    model: &mut Model<'_>,
    labeled: &LabeledBatch,
    unlabeled: &UnlabeledBatch,
    cfg: &SslMethodConfig,
    epoch: usize,
    rngs: &mut StepRngs,
    running: Option<&mut ClassDistributions>,
) -> Result<StepLoss> {
    check_batches("adamatch", labeled, unlabeled)?;
    let xl = augment(&labeled.x, &cfg.weak, &mut rngs.augment)?;
    let uw = augment(&unlabeled.x, &cfg.weak, &mut rngs.augment)?;
    let us = augment(&unlabeled.x, &cfg.strong, &mut rngs.augment)?;
    let (logits_l, logits_w, logits_s) = three_way_logits(g, model, &xl, &uw, &us, rngs)?;

    let y = g.constant(labeled.y.clone());
    let sup = g.cross_entropy(logits_l, y)?;
    let q_l = softmax_rows(g.value(logits_l));
    let q_u = softmax_rows(g.value(logits_w));
    let (e_l, e_u) = (column_means(&q_l), column_means(&q_u));
    let (e_l, e_u) = match running {
        Some(r) => r.update(&e_l, &e_u),
        None => (e_l, e_u),
    };
    let rectified = rectify_with(&q_u, &e_l, &e_u)?;
    let threshold = relative_threshold(&q_l, cfg.tau);
    let mask = confidence_mask(&rectified, threshold);
    let (unsup, target) = masked_pseudo_ce(g, logits_s, &rectified, &mask)?;

    let (total, mut diagnostics) = StepLoss::assemble(g, sup, unsup, warmup_weight(epoch, cfg))?;
    diagnostics.mask_rate = Some(mask_rate(&mask));
    diagnostics.rel_threshold = Some(threshold);
    Ok(StepLoss {
        total,
        diagnostics,
        targets: vec![target],
        decoder: None,
    })
}
