//! EEG-style feature pipeline: filtering, segmentation, differential-entropy
//! features, normalization, splitting, synthetic data and feature files.

mod dataset;
pub mod filter;
mod io;
mod pipeline;

pub use dataset::{
    normalize_minmax, split_dataset, synth_generate, DatasetSplit, FeatureDataset, MinMaxScaler,
    SYNTH_SESSIONS, VALIDATION_SHARE,
};
pub use io::{
    load_any, load_features, load_features_csv, save_features, save_features_csv, FEATURE_MAGIC,
};
pub use pipeline::{
    bandpass, de_features, de_from_variance, decimate, extract_features, sample_variance, segment,
    DeFeatures, PipelineConfig, PipelineDiagnostics, RawRecording, Segments, DE_BANDS,
    DE_VARIANCE_FLOOR,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Session-based evaluation protocol of the two emotion datasets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Seed,
    SeedIv,
}

impl Protocol {
    pub fn total_sessions(self) -> u32 {
        match self {
            Protocol::Seed => 15,
            Protocol::SeedIv => 24,
        }
    }

    /// Sessions `0..train_sessions()` are training data; the rest are test.
    pub fn train_sessions(self) -> u32 {
        match self {
            Protocol::Seed => 9,
            Protocol::SeedIv => 16,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Seed => "seed",
            Protocol::SeedIv => "seed_iv",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seed" => Ok(Protocol::Seed),
            "seed_iv" => Ok(Protocol::SeedIv),
            _ => Err(Error::Config {
                path: "protocol".into(),
                msg: format!("unknown protocol `{s}`; valid: seed, seed_iv"),
            }),
        }
    }
}
