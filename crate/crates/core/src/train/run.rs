//! One training run: the epoch loop, evaluation and its report.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::batching::{unlabeled_batch, StratifiedSampler};
use crate::error::{Error, Result};
use crate::nn::{collect_grads, ArchConfig, BackboneParams, Mode};
use crate::rng::{self, Stream};
use crate::signal::{normalize_minmax, DatasetSplit, FeatureDataset};
use crate::ssl::{
    compute_loss, LabeledBatch, Method, MethodState, Model, SslMethodConfig, StepRngs,
    UnlabeledBatch,
};
use crate::tensor::Graph;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Parameters from the epoch with the best validation accuracy; ties go
    /// to the later epoch.
    BestValidation,
    Last,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: SslMethodConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub m: usize,
    pub selection: Selection,
    /// Optional cap on optimizer steps per epoch.
    pub max_steps_per_epoch: Option<usize>,
    /// Lets supervised-only run with an empty labeled set.
    pub allow_empty_labeled: bool,
}

impl TrainConfig {
    pub fn new(method: SslMethodConfig, m: usize, seed: u64) -> Self {
        TrainConfig {
            method,
            epochs: 30,
            batch_size: 8,
            adam: AdamConfig::default(),
            seed,
            m,
            selection: Selection::BestValidation,
            max_steps_per_epoch: None,
            allow_empty_labeled: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid(
                "train",
                "epochs and batch_size must be >= 1",
            ));
        }
        if self.max_steps_per_epoch == Some(0) {
            return Err(Error::invalid("train", "max_steps_per_epoch must be >= 1"));
        }
        self.adam.validate()?;
        self.method.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub sup_loss: f64,
    pub unsup_loss: f64,
    pub weight: f64,
    pub mask_rate: Option<f64>,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: Method,
    pub m: usize,
    pub seed: u64,
    pub dataset: String,
    pub config: TrainConfig,
    pub num_labeled: usize,
    pub num_unlabeled: usize,
    pub num_validation: usize,
    pub num_test: usize,
    pub steps_per_epoch: usize,
    pub epochs: Vec<EpochRecord>,
    pub selected_epoch: usize,
    pub test_accuracy: f64,
    pub wall_time_secs: f64,
}

impl TrainReport {
    /// JSON with the wall-clock field removed; equal for equal runs.
    pub fn deterministic_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(o) = v.as_object_mut() {
            o.remove("wall_time_secs");
        }
        Ok(serde_json::to_string(&v)?)
    }
}

const EVAL_CHUNK: usize = 512;

/// Eval-mode accuracy of `params` on the given dataset rows.
pub fn evaluate(params: &BackboneParams, rows: &[usize], ds: &FeatureDataset) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::invalid("evaluate", "empty evaluation set"));
    }
    let mut correct = 0usize;
    for chunk in rows.chunks(EVAL_CHUNK) {
        let logits = params.predict(&ds.gather(chunk))?;
        correct += logits
            .argmax_rows()
            .iter()
            .zip(chunk)
            .filter(|(p, &r)| **p == ds.labels[r])
            .count();
    }
    Ok(correct as f64 / rows.len() as f64)
}

#[derive(Default)]
struct EpochSums {
    sup: f64,
    unsup: f64,
    mask: f64,
    has_mask: bool,
    weight: f64,
    steps: usize,
}

/// Trains one cell. Features are min-max normalized with statistics from the
/// split's training pool before anything else happens.
pub fn train(
    cfg: &TrainConfig,
    split: &DatasetSplit,
    ds: &FeatureDataset,
    dataset_name: &str,
) -> Result<TrainReport> {
    cfg.validate()?;
    let started = Instant::now();
    let method = cfg.method.method;
    let pool_rows = ds.rows_for(&split.training_pool())?;
    let (ds, _) = normalize_minmax(ds, &pool_rows)?;
    let labeled_rows = ds.rows_for(&split.labeled_ids)?;
    let unlabeled_rows = ds.rows_for(&split.unlabeled_ids)?;
    let val_rows = ds.rows_for(&split.validation_ids)?;
    let test_rows = ds.rows_for(&split.test_ids)?;

    let supervised = method == Method::SupervisedOnly;
    if labeled_rows.is_empty() && !(supervised && cfg.allow_empty_labeled) {
        return Err(Error::Data("empty labeled set".into()));
    }
    if unlabeled_rows.is_empty() && !supervised {
        return Err(Error::Data(format!(
            "{method} needs unlabeled data but the unlabeled set is empty"
        )));
    }

    let arch = ArchConfig::new(ds.bands(), ds.channels(), ds.num_classes);
    let mut params = BackboneParams::init(arch, cfg.seed)?;
    let state_ids: Vec<u32> = split
        .labeled_ids
        .iter()
        .chain(&split.unlabeled_ids)
        .copied()
        .collect();
    let mut state = MethodState::new(&cfg.method, &params, &state_ids, cfg.seed)?;
    let mut adam = AdamState::new(&params.trainable(), cfg.adam);
    let mut dec_adam = state
        .decoder
        .as_ref()
        .map(|d| AdamState::new(&d.trainable(), cfg.adam));

    let mut batch_rng = rng::stream(cfg.seed, Stream::Batch);
    let mut rngs = StepRngs::from_seed(cfg.seed);
    let labels: Vec<usize> = labeled_rows.iter().map(|&r| ds.labels[r]).collect();
    let mut sampler = StratifiedSampler::new(&labeled_rows, &labels, ds.num_classes);

    let b = cfg.batch_size;
    let epoch_pool = if unlabeled_rows.is_empty() {
        labeled_rows.len()
    } else {
        unlabeled_rows.len()
    };
    let mut steps = epoch_pool.div_ceil(b);
    if let Some(cap) = cfg.max_steps_per_epoch {
        steps = steps.min(cap);
    }
    if sampler.is_empty() {
        steps = 0;
    }

    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, BackboneParams)> = None;
    let mut perm = unlabeled_rows.clone();
    for epoch in 0..cfg.epochs {
        perm.shuffle(&mut batch_rng);
        let mut sums = EpochSums::default();
        for step in 0..steps {
            let l_rows = sampler.next_batch(b, &mut batch_rng);
            let l_ids: Vec<u32> = l_rows.iter().map(|&r| ds.sample_ids[r]).collect();
            let l_labels: Vec<usize> = l_rows.iter().map(|&r| ds.labels[r]).collect();
            let labeled = LabeledBatch::new(ds.gather(&l_rows), &l_labels, ds.num_classes, l_ids)?;
            let u_rows = if perm.is_empty() {
                l_rows.clone()
            } else {
                unlabeled_batch(&perm, step, b)
            };
            let unlabeled = UnlabeledBatch {
                x: ds.gather(&u_rows),
                ids: u_rows.iter().map(|&r| ds.sample_ids[r]).collect(),
            };

            let mut g = Graph::new();
            let mut model = Model::new(&mut g, &mut params, Mode::Train);
            let loss = compute_loss(
                &mut g,
                &mut model,
                &mut state,
                &labeled,
                &unlabeled,
                &cfg.method,
                epoch,
                &mut rngs,
            )?;
            let vars = model.bound.vars();
            let total = g.value(loss.total).item();
            if !total.is_finite() {
                return Err(Error::Data(format!(
                    "{method}: non-finite loss at epoch {epoch} step {step}"
                )));
            }
            let grads = g.backward(loss.total)?;
            let grad_vals = collect_grads(&grads, &vars, &params.trainable());
            adam_step(&mut params.trainable_mut(), &grad_vals, &mut adam)?;
            if let (Some(db), Some(dec), Some(da)) =
                (&loss.decoder, state.decoder.as_mut(), dec_adam.as_mut())
            {
                let dg = collect_grads(&grads, &db.vars(), &dec.trainable());
                adam_step(&mut dec.trainable_mut(), &dg, da)?;
            }
            state.after_step(&params);

            let d = &loss.diagnostics;
            sums.sup += d.sup_loss;
            sums.unsup += d.unsup_loss;
            sums.weight = d.weight;
            if let Some(mr) = d.mask_rate {
                sums.mask += mr;
                sums.has_mask = true;
            }
            sums.steps += 1;
        }
        state.end_epoch();

        let val_accuracy = if val_rows.is_empty() {
            0.0
        } else {
            evaluate(&params, &val_rows, &ds)?
        };
        let n = sums.steps.max(1) as f64;
        let weight = if sums.steps == 0 {
            crate::ssl::warmup_weight(epoch, &cfg.method)
        } else {
            sums.weight
        };
        records.push(EpochRecord {
            epoch,
            sup_loss: sums.sup / n,
            unsup_loss: sums.unsup / n,
            weight,
            mask_rate: sums.has_mask.then(|| sums.mask / n),
            val_accuracy,
        });
        log::debug!(
            "{method} m={} seed={} epoch {epoch}: Ls={:.4} Lu={:.4} w={weight:.2} val={val_accuracy:.4}",
            cfg.m,
            cfg.seed,
            sums.sup / n,
            sums.unsup / n
        );
        if cfg.selection == Selection::BestValidation
            && best.as_ref().is_none_or(|(acc, _, _)| val_accuracy >= *acc)
        {
            best = Some((val_accuracy, epoch, params.clone()));
        }
    }

    let (selected_epoch, final_params) = match best {
        Some((_, e, p)) => (e, p),
        None => (cfg.epochs - 1, params),
    };
    let test_accuracy = if test_rows.is_empty() {
        0.0
    } else {
        evaluate(&final_params, &test_rows, &ds)?
    };
    Ok(TrainReport {
        method,
        m: cfg.m,
        seed: cfg.seed,
        dataset: dataset_name.to_string(),
        config: cfg.clone(),
        num_labeled: labeled_rows.len(),
        num_unlabeled: unlabeled_rows.len(),
        num_validation: val_rows.len(),
        num_test: test_rows.len(),
        steps_per_epoch: steps,
        epochs: records,
        selected_epoch,
        test_accuracy,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{split_dataset, synth_generate, Protocol};

    fn quick(method: Method, m: usize, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::new(SslMethodConfig::defaults(method, Protocol::Seed), m, seed);
        cfg.epochs = 2;
        cfg.max_steps_per_epoch = Some(5);
        cfg
    }

    #[test]
    fn every_method_runs_and_reports() {
        let ds = synth_generate(3, 60, 4.0, 0).unwrap();
        let split = split_dataset(&ds, 2, 0, Protocol::Seed).unwrap();
        for method in Method::ALL {
            let r = train(&quick(method, 2, 0), &split, &ds, "synth").unwrap();
            assert_eq!(r.epochs.len(), 2, "{method}");
            assert!((0.0..=1.0).contains(&r.test_accuracy));
            assert_eq!(r.num_labeled, 6);
            if method != Method::FixMatch && method != Method::SupervisedOnly {
                assert_eq!(r.epochs[0].weight, 0.0, "{method}");
            }
        }
    }

    #[test]
    fn reports_are_deterministic() {
        let ds = synth_generate(3, 60, 4.0, 1).unwrap();
        let split = split_dataset(&ds, 1, 3, Protocol::Seed).unwrap();
        let cfg = quick(Method::MeanTeacher, 1, 3);
        let a = train(&cfg, &split, &ds, "synth").unwrap();
        let b = train(&cfg, &split, &ds, "synth").unwrap();
        assert_eq!(
            a.deterministic_json().unwrap(),
            b.deterministic_json().unwrap()
        );
    }

    #[test]
    fn evaluate_oracle_and_errors() {
        let ds = synth_generate(3, 20, 4.0, 1).unwrap();
        let mut p = BackboneParams::init(ArchConfig::new(5, 62, 3), 0).unwrap();
        assert!(evaluate(&p, &[], &ds).is_err());
        // Zero weights everywhere except a bias that always picks class 0.
        for t in p.trainable_mut() {
            t.data_mut().fill(0.0);
        }
        p.fc2.bias.data_mut()[0] = 1.0;
        let zeros: Vec<usize> = (0..ds.len()).filter(|&r| ds.labels[r] == 0).collect();
        let others: Vec<usize> = (0..ds.len()).filter(|&r| ds.labels[r] != 0).collect();
        assert_eq!(evaluate(&p, &zeros, &ds).unwrap(), 1.0);
        assert_eq!(evaluate(&p, &others, &ds).unwrap(), 0.0);
    }

    #[test]
    fn empty_labeled_set_is_rejected() {
        let ds = synth_generate(3, 20, 4.0, 1).unwrap();
        let mut split = split_dataset(&ds, 1, 0, Protocol::Seed).unwrap();
        split.unlabeled_ids.extend(split.labeled_ids.drain(..));
        split.unlabeled_ids.sort_unstable();
        assert!(train(&quick(Method::FixMatch, 1, 0), &split, &ds, "synth").is_err());
        let mut cfg = quick(Method::SupervisedOnly, 1, 0);
        assert!(train(&cfg, &split, &ds, "synth").is_err());
        cfg.allow_empty_labeled = true;
        assert!(train(&cfg, &split, &ds, "synth").is_ok());
    }
}
