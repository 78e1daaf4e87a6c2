//! Feature datasets, normalization, the session-based split protocol and
//! the synthetic generator.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Protocol;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDataset {
    /// `(N, bands, channels)`.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub session_ids: Vec<u32>,
    pub sample_ids: Vec<u32>,
    pub num_classes: usize,
}

impl FeatureDataset {
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        session_ids: Vec<u32>,
        sample_ids: Vec<u32>,
        num_classes: usize,
    ) -> Result<Self> {
        let ds = FeatureDataset {
            features,
            labels,
            session_ids,
            sample_ids,
            num_classes,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if self.features.rank() != 3 || self.features.shape()[0] != n {
            return Err(Error::Data(format!(
                "features {:?} do not match {n} labels",
                self.features.shape()
            )));
        }
        if self.session_ids.len() != n || self.sample_ids.len() != n {
            return Err(Error::Data(
                "label, session and sample id counts differ".into(),
            ));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::Data(format!(
                "label {l} out of range for {} classes",
                self.num_classes
            )));
        }
        if !self.features.is_finite() {
            return Err(Error::Data("non-finite feature value".into()));
        }
        let unique: BTreeSet<_> = self.sample_ids.iter().collect();
        if unique.len() != n {
            return Err(Error::Data("duplicate sample ids".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn bands(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[2]
    }

    pub fn feature_len(&self) -> usize {
        self.bands() * self.channels()
    }

    /// Row index of every sample id.
    pub fn index_of(&self) -> BTreeMap<u32, usize> {
        self.sample_ids
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, i))
            .collect()
    }

    /// Rows for the given sample ids, in the given order.
    pub fn rows_for(&self, ids: &[u32]) -> Result<Vec<usize>> {
        let index = self.index_of();
        ids.iter()
            .map(|id| {
                index
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::Data(format!("unknown sample id {id}")))
            })
            .collect()
    }

    /// `(len(rows), bands, channels)` feature block.
    pub fn gather(&self, rows: &[usize]) -> Tensor {
        self.features.select_rows(rows)
    }
}

/// Per-coordinate min/max fitted on the training pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// Coordinates with `max == min`; they map to 0.5.
    pub constant: Vec<usize>,
}

impl MinMaxScaler {
    pub fn fit(ds: &FeatureDataset, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data(
                "cannot fit normalization on an empty pool".into(),
            ));
        }
        let d = ds.feature_len();
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        let data = ds.features.data();
        for &r in rows {
            for (j, v) in data[r * d..(r + 1) * d].iter().enumerate() {
                min[j] = min[j].min(*v);
                max[j] = max[j].max(*v);
            }
        }
        let constant: Vec<usize> = (0..d).filter(|&j| max[j] == min[j]).collect();
        if !constant.is_empty() {
            log::warn!(
                "{} constant feature coordinate(s) mapped to 0.5",
                constant.len()
            );
        }
        Ok(MinMaxScaler { min, max, constant })
    }

    pub fn apply(&self, ds: &FeatureDataset) -> Result<FeatureDataset> {
        let d = ds.feature_len();
        if d != self.min.len() {
            return Err(Error::Data(format!(
                "scaler has {} coordinates, dataset {d}",
                self.min.len()
            )));
        }
        let mut out = ds.clone();
        for row in out.features.data_mut().chunks_mut(d) {
            for (j, v) in row.iter_mut().enumerate() {
                let span = self.max[j] - self.min[j];
                *v = if span == 0.0 {
                    0.5
                } else {
                    (*v - self.min[j]) / span
                };
            }
        }
        Ok(out)
    }
}

/// Fits on `train_rows` and maps the whole dataset with those constants.
pub fn normalize_minmax(
    ds: &FeatureDataset,
    train_rows: &[usize],
) -> Result<(FeatureDataset, MinMaxScaler)> {
    let scaler = MinMaxScaler::fit(ds, train_rows)?;
    Ok((scaler.apply(ds)?, scaler))
}

pub const VALIDATION_SHARE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub labeled_ids: Vec<u32>,
    pub unlabeled_ids: Vec<u32>,
    pub validation_ids: Vec<u32>,
    pub test_ids: Vec<u32>,
    pub m: usize,
}

impl DatasetSplit {
    pub fn training_pool(&self) -> Vec<u32> {
        let mut all: Vec<u32> = self
            .labeled_ids
            .iter()
            .chain(&self.unlabeled_ids)
            .chain(&self.validation_ids)
            .copied()
            .collect();
        all.sort_unstable();
        all
    }
}

/// Sessions below the protocol's training count form the training pool; the
/// rest are test. Within the pool each class contributes a rounded 10% to
/// validation and exactly `m` samples to the labeled set; the remainder is
/// unlabeled. All id lists are sorted.
pub fn split_dataset(
    ds: &FeatureDataset,
    m: usize,
    seed: u64,
    protocol: Protocol,
) -> Result<DatasetSplit> {
    if m == 0 {
        return Err(Error::invalid("split", "m must be at least 1"));
    }
    let train_sessions = protocol.train_sessions();
    let mut by_class: Vec<Vec<u32>> = vec![Vec::new(); ds.num_classes];
    let mut test_ids = Vec::new();
    for i in 0..ds.len() {
        if ds.session_ids[i] < train_sessions {
            by_class[ds.labels[i]].push(ds.sample_ids[i]);
        } else {
            test_ids.push(ds.sample_ids[i]);
        }
    }
    let mut rng = rng::stream(seed, Stream::Split);
    let (mut labeled, mut unlabeled, mut validation) = (Vec::new(), Vec::new(), Vec::new());
    for (c, ids) in by_class.iter_mut().enumerate() {
        ids.sort_unstable();
        let n_val = (ids.len() as f64 * VALIDATION_SHARE).round() as usize;
        if ids.len() < m + n_val {
            return Err(Error::Data(format!(
                "class {c} has {} training samples; need {} ({m} labeled + {n_val} validation)",
                ids.len(),
                m + n_val
            )));
        }
        ids.shuffle(&mut rng);
        validation.extend_from_slice(&ids[..n_val]);
        labeled.extend_from_slice(&ids[n_val..n_val + m]);
        unlabeled.extend_from_slice(&ids[n_val + m..]);
    }
    for v in [&mut labeled, &mut unlabeled, &mut validation, &mut test_ids] {
        v.sort_unstable();
    }
    Ok(DatasetSplit {
        labeled_ids: labeled,
        unlabeled_ids: unlabeled,
        validation_ids: validation,
        test_ids,
        m,
    })
}

pub const SYNTH_SESSIONS: u32 = 15;
pub const SYNTH_BANDS: usize = 5;
pub const SYNTH_CHANNELS: usize = 62;

/// Gaussian classes in a `5 × 62` feature space: class `c` has mean
/// `sep · u_c` for a random unit direction `u_c` and identity covariance.
///
/// Samples are interleaved by class (`id = j·k + c` for the `j`-th sample of
/// class `c`), and that sample lands in session `j mod 15`.
pub fn synth_generate(k: usize, n_per_class: usize, sep: f64, seed: u64) -> Result<FeatureDataset> {
    if k < 2 {
        return Err(Error::invalid(
            "synth",
            format!("need at least 2 classes, got {k}"),
        ));
    }
    if !(sep >= 0.0) {
        return Err(Error::invalid(
            "synth",
            format!("separation {sep} must be >= 0"),
        ));
    }
    let d = SYNTH_BANDS * SYNTH_CHANNELS;
    let mut rng = rng::stream(seed, Stream::Synth);
    let means: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| sep * x / norm).collect()
        })
        .collect();
    let n = k * n_per_class;
    let mut data = Vec::with_capacity(n * d);
    let (mut labels, mut sessions) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for j in 0..n_per_class {
        for (c, mean) in means.iter().enumerate() {
            data.extend(mean.iter().map(|mu| {
                let z: f64 = StandardNormal.sample(&mut rng);
                mu + z
            }));
            labels.push(c);
            sessions.push((j as u32) % SYNTH_SESSIONS);
        }
    }
    let features = Tensor::new(vec![n, SYNTH_BANDS, SYNTH_CHANNELS], data)?;
    FeatureDataset::new(features, labels, sessions, (0..n as u32).collect(), k)
}
