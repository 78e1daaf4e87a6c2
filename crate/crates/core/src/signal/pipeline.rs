//! Raw multichannel recordings to differential-entropy feature windows.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::filter::{butter_bandpass, butter_lowpass};
use super::{FeatureDataset, Protocol};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ANTI_ALIAS_ORDER: usize = 8;
pub const ANTI_ALIAS_FRACTION: f64 = 0.4;
pub const BANDPASS_ORDER: usize = 4;
/// Floor on band variance before taking the logarithm.
pub const DE_VARIANCE_FLOOR: f64 = 1e-12;

/// delta, theta, alpha, beta, gamma (Hz).
pub const DE_BANDS: [(f64, f64); 5] = [
    (1.0, 4.0),
    (4.0, 8.0),
    (8.0, 14.0),
    (14.0, 31.0),
    (31.0, 50.0),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawRecording {
    /// Channel-major: `samples[c][t]`.
    pub samples: Vec<Vec<f64>>,
    pub sample_rate_hz: u32,
    pub session_id: u32,
    pub label: usize,
}

impl RawRecording {
    pub fn new(
        samples: Vec<Vec<f64>>,
        sample_rate_hz: u32,
        session_id: u32,
        label: usize,
    ) -> Result<Self> {
        let rec = RawRecording {
            samples,
            sample_rate_hz,
            session_id,
            label,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate_hz == 0 {
            return Err(Error::invalid("recording", "sample rate must be positive"));
        }
        let t = self.len();
        if self.samples.is_empty() || t == 0 {
            return Err(Error::invalid("recording", "recording has no samples"));
        }
        if self.samples.iter().any(|c| c.len() != t) {
            return Err(Error::invalid("recording", "channels differ in length"));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.samples.len()
    }

    pub fn len(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn with_samples(&self, samples: Vec<Vec<f64>>, rate: u32) -> RawRecording {
        RawRecording {
            samples,
            sample_rate_hz: rate,
            session_id: self.session_id,
            label: self.label,
        }
    }
}

/// Anti-alias low-pass at `0.4 · target_hz`, zero-phase, then keep every
/// `rate / target`-th sample.
pub fn decimate(rec: &RawRecording, target_hz: u32) -> Result<RawRecording> {
    rec.validate()?;
    if target_hz == 0 || rec.sample_rate_hz % target_hz != 0 {
        return Err(Error::invalid(
            "decimate",
            format!(
                "{} Hz is not an integer multiple of {target_hz} Hz",
                rec.sample_rate_hz
            ),
        ));
    }
    let step = (rec.sample_rate_hz / target_hz) as usize;
    if step == 1 {
        return Ok(rec.clone());
    }
    let sos = butter_lowpass(
        ANTI_ALIAS_ORDER,
        ANTI_ALIAS_FRACTION * target_hz as f64,
        rec.sample_rate_hz as f64,
    )?;
    let samples = rec
        .samples
        .par_iter()
        .map(|c| sos.filtfilt(c).into_iter().step_by(step).collect())
        .collect();
    Ok(rec.with_samples(samples, target_hz))
}

/// Fourth-order zero-phase Butterworth band-pass on every channel.
pub fn bandpass(rec: &RawRecording, low_hz: f64, high_hz: f64) -> Result<RawRecording> {
    rec.validate()?;
    let sos = butter_bandpass(BANDPASS_ORDER, low_hz, high_hz, rec.sample_rate_hz as f64)?;
    let samples = rec.samples.par_iter().map(|c| sos.filtfilt(c)).collect();
    Ok(rec.with_samples(samples, rec.sample_rate_hz))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segments {
    /// Each window is channel-major `(C, S)`.
    pub windows: Vec<Vec<Vec<f64>>>,
    pub dropped_samples: usize,
    /// Set when the recording is shorter than one window.
    pub too_short: bool,
}

/// Consecutive non-overlapping windows of `seconds`; the tail is dropped.
pub fn segment(rec: &RawRecording, seconds: f64) -> Result<Segments> {
    let s_f = seconds * rec.sample_rate_hz as f64;
    let s = s_f.round() as usize;
    if !(seconds > 0.0) || (s_f - s as f64).abs() > 1e-9 || s == 0 {
        return Err(Error::invalid(
            "segment",
            format!(
                "{seconds} s at {} Hz is not a whole number of samples",
                rec.sample_rate_hz
            ),
        ));
    }
    let t = rec.len();
    let n = t / s;
    let windows = (0..n)
        .map(|w| {
            rec.samples
                .iter()
                .map(|c| c[w * s..(w + 1) * s].to_vec())
                .collect()
        })
        .collect();
    Ok(Segments {
        windows,
        dropped_samples: t - n * s,
        too_short: n == 0,
    })
}

/// `½ ln(2πeσ²)`, with σ² floored at [`DE_VARIANCE_FLOOR`]. The flag reports
/// whether the floor was applied.
pub fn de_from_variance(var: f64) -> (f64, bool) {
    let floored = !(var > DE_VARIANCE_FLOOR);
    let v = if floored { DE_VARIANCE_FLOOR } else { var };
    (0.5 * (2.0 * PI * std::f64::consts::E * v).ln(), floored)
}

/// Unbiased sample variance.
pub fn sample_variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeFeatures {
    /// `(bands, channels)`.
    pub values: Tensor,
    /// Number of (band, channel) cells that hit the variance floor.
    pub floored: usize,
}

/// Differential entropy per band and channel of one `(C, S)` window.
pub fn de_features(window: &[Vec<f64>], rate_hz: u32) -> Result<DeFeatures> {
    let s = window.first().map_or(0, Vec::len);
    if s < 2 || window.iter().any(|c| c.len() != s) {
        return Err(Error::invalid(
            "de_features",
            format!("window needs >= 2 equal-length samples, got {s}"),
        ));
    }
    let fs = rate_hz as f64;
    let c = window.len();
    let mut values = Vec::with_capacity(DE_BANDS.len() * c);
    let mut floored = 0;
    for &(lo, hi) in &DE_BANDS {
        let sos = butter_bandpass(BANDPASS_ORDER, lo, hi, fs)?;
        for ch in window {
            let (de, f) = de_from_variance(sample_variance(&sos.filtfilt(ch)));
            floored += f as usize;
            values.push(de);
        }
    }
    Ok(DeFeatures {
        values: Tensor::new(vec![DE_BANDS.len(), c], values)?,
        floored,
    })
}

/// Settings for turning raw recordings into a feature dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub target_hz: u32,
    pub band_low_hz: f64,
    pub band_high_hz: f64,
    pub window_seconds: f64,
}

impl PipelineConfig {
    pub fn for_protocol(protocol: Protocol) -> Self {
        let (band_low_hz, band_high_hz, window_seconds) = match protocol {
            Protocol::Seed => (0.3, 50.0, 1.0),
            Protocol::SeedIv => (1.0, 75.0, 4.0),
        };
        PipelineConfig {
            target_hz: 200,
            band_low_hz,
            band_high_hz,
            window_seconds,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PipelineDiagnostics {
    pub short_recordings: usize,
    pub dropped_samples: usize,
    pub floored_cells: usize,
}

/// Full chain: decimate, band-pass, segment, DE. Recordings are processed in
/// parallel; sample ids follow recording then window order.
pub fn extract_features(
    recordings: &[RawRecording],
    cfg: &PipelineConfig,
    num_classes: usize,
) -> Result<(FeatureDataset, PipelineDiagnostics)> {
    let per_rec: Vec<(Vec<DeFeatures>, Segments, u32, usize)> = recordings
        .par_iter()
        .map(|rec| {
            let r = decimate(rec, cfg.target_hz)?;
            let r = bandpass(&r, cfg.band_low_hz, cfg.band_high_hz)?;
            let segs = segment(&r, cfg.window_seconds)?;
            let feats = segs
                .windows
                .iter()
                .map(|w| de_features(w, r.sample_rate_hz))
                .collect::<Result<Vec<_>>>()?;
            Ok((feats, segs, rec.session_id, rec.label))
        })
        .collect::<Result<_>>()?;

    let mut diag = PipelineDiagnostics::default();
    let channels = recordings.first().map_or(0, RawRecording::channels);
    let mut data = Vec::new();
    let (mut labels, mut sessions) = (Vec::new(), Vec::new());
    for (feats, segs, session, label) in per_rec {
        diag.short_recordings += segs.too_short as usize;
        diag.dropped_samples += segs.dropped_samples;
        for f in feats {
            if f.values.shape()[1] != channels {
                return Err(Error::Data("recordings differ in channel count".into()));
            }
            diag.floored_cells += f.floored;
            data.extend_from_slice(f.values.data());
            labels.push(label);
            sessions.push(session);
        }
    }
    if diag.short_recordings > 0 {
        log::warn!(
            "{} recording(s) shorter than one window",
            diag.short_recordings
        );
    }
    if diag.floored_cells > 0 {
        log::warn!("{} DE cell(s) hit the variance floor", diag.floored_cells);
    }
    let n = labels.len();
    let features = Tensor::new(vec![n, DE_BANDS.len(), channels], data)?;
    let ds = FeatureDataset::new(
        features,
        labels,
        sessions,
        (0..n as u32).collect(),
        num_classes,
    )?;
    Ok((ds, diag))
}
