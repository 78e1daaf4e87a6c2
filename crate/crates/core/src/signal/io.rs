//! Feature files.
//!
//! Binary (little-endian): magic `SMDE1\0`, `u32` N, `u32` k, `u32` bands,
//! `u32` channels, then N records of `u32` sample id, `u32` session id,
//! `u16` label and `bands × channels` `f64` features.
//!
//! CSV: header `sample_id,session_id,label,f0,...` with one row per sample.

use std::fs;
use std::path::Path;

use super::FeatureDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 6] = b"SMDE1\0";
const HEADER_LEN: usize = 6 + 16;

pub fn save_features(ds: &FeatureDataset, path: &Path) -> Result<()> {
    ds.validate()?;
    let d = ds.feature_len();
    let mut buf = Vec::with_capacity(HEADER_LEN + ds.len() * (10 + 8 * d));
    buf.extend_from_slice(FEATURE_MAGIC);
    for v in [ds.len(), ds.num_classes, ds.bands(), ds.channels()] {
        let v = u32::try_from(v).map_err(|_| Error::Data(format!("{v} does not fit in u32")))?;
        buf.extend(v.to_le_bytes());
    }
    for (i, row) in ds
        .features
        .data()
        .chunks(d.max(1))
        .take(ds.len())
        .enumerate()
    {
        buf.extend(ds.sample_ids[i].to_le_bytes());
        buf.extend(ds.session_ids[i].to_le_bytes());
        let label =
            u16::try_from(ds.labels[i]).map_err(|_| Error::Data("label exceeds u16".into()))?;
        buf.extend(label.to_le_bytes());
        for v in row {
            buf.extend(v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

pub fn load_features(path: &Path) -> Result<FeatureDataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if !bytes.starts_with(FEATURE_MAGIC) {
        return Err(Error::BadMagic { path: path.into() });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.into(),
            detail: "incomplete header".into(),
        });
    }
    let [n, k, bands, channels] = [6, 10, 14, 18].map(|at| le_u32(&bytes, at) as usize);
    let d = bands * channels;
    let record = 10 + 8 * d;
    let expected = HEADER_LEN + n * record;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.into(),
            detail: format!(
                "{n} records need {expected} bytes, file has {}",
                bytes.len()
            ),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Data(format!(
            "{}: {} trailing bytes",
            path.display(),
            bytes.len() - expected
        )));
    }
    let mut data = Vec::with_capacity(n * d);
    let (mut labels, mut sessions, mut ids) = (Vec::new(), Vec::new(), Vec::new());
    for r in 0..n {
        let at = HEADER_LEN + r * record;
        ids.push(le_u32(&bytes, at));
        sessions.push(le_u32(&bytes, at + 4));
        let label = u16::from_le_bytes([bytes[at + 8], bytes[at + 9]]) as usize;
        if label >= k {
            return Err(Error::Data(format!(
                "{}: record {r} has label {label} but the header declares {k} classes",
                path.display()
            )));
        }
        labels.push(label);
        data.extend(
            bytes[at + 10..at + record]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))),
        );
    }
    let features = Tensor::new(vec![n, bands, channels], data)?;
    FeatureDataset::new(features, labels, sessions, ids, k)
}

pub fn save_features_csv(ds: &FeatureDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(Error::from)?;
    let d = ds.feature_len();
    let mut header = vec!["sample_id".to_string(), "session_id".into(), "label".into()];
    header.extend((0..d).map(|j| format!("f{j}")));
    w.write_record(&header)?;
    for (i, row) in ds
        .features
        .data()
        .chunks(d.max(1))
        .take(ds.len())
        .enumerate()
    {
        let mut rec = vec![
            ds.sample_ids[i].to_string(),
            ds.session_ids[i].to_string(),
            ds.labels[i].to_string(),
        ];
        rec.extend(row.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads the CSV layout. `bands` splits each row's features into
/// `(bands, len / bands)`; `num_classes` defaults to the largest label + 1.
pub fn load_features_csv(
    path: &Path,
    bands: usize,
    num_classes: Option<usize>,
) -> Result<FeatureDataset> {
    let mut r = csv::Reader::from_path(path).map_err(Error::from)?;
    let header = r.headers()?.clone();
    let fixed = ["sample_id", "session_id", "label"];
    if header.len() < 4 || header.iter().take(3).ne(fixed) {
        return Err(Error::Data(format!(
            "{}: header must start with sample_id,session_id,label",
            path.display()
        )));
    }
    let d = header.len() - 3;
    if bands == 0 || d % bands != 0 {
        return Err(Error::Data(format!(
            "{d} features do not split into {bands} bands"
        )));
    }
    let parse_err = |line: usize, what: &str| {
        Error::Data(format!("{}: line {line}: bad {what}", path.display()))
    };
    let mut data = Vec::new();
    let (mut labels, mut sessions, mut ids) = (Vec::new(), Vec::new(), Vec::new());
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        ids.push(
            rec[0]
                .trim()
                .parse::<u32>()
                .map_err(|_| parse_err(line, "sample_id"))?,
        );
        sessions.push(
            rec[1]
                .trim()
                .parse::<u32>()
                .map_err(|_| parse_err(line, "session_id"))?,
        );
        labels.push(
            rec[2]
                .trim()
                .parse::<usize>()
                .map_err(|_| parse_err(line, "label"))?,
        );
        for f in rec.iter().skip(3) {
            data.push(
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| parse_err(line, "feature"))?,
            );
        }
    }
    let k = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let n = labels.len();
    let features = Tensor::new(vec![n, bands, d / bands], data)?;
    FeatureDataset::new(features, labels, sessions, ids, k)
}

/// Chooses the reader by extension (`.csv` → CSV, anything else → binary).
pub fn load_any(path: &Path, bands: usize, num_classes: Option<usize>) -> Result<FeatureDataset> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("csv") => load_features_csv(path, bands, num_classes),
        _ => load_features(path),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::synth_generate;

    #[test]
    fn binary_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.smde");
        let ds = synth_generate(3, 7, 2.0, 5).unwrap();
        save_features(&ds, &p).unwrap();
        let back = load_features(&p).unwrap();
        assert_eq!(ds, back);
        let a: Vec<u64> = ds.features.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.features.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        let ds = synth_generate(3, 4, 2.0, 5).unwrap();
        save_features_csv(&ds, &p).unwrap();
        assert_eq!(load_any(&p, 5, Some(3)).unwrap(), ds);
    }

    #[test]
    fn empty_file_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.smde");
        let ds =
            FeatureDataset::new(Tensor::zeros(&[0, 5, 62]), vec![], vec![], vec![], 3).unwrap();
        save_features(&ds, &p).unwrap();
        let back = load_features(&p).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.num_classes, 3);
    }

    #[test]
    fn structured_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.smde");
        let ds = synth_generate(2, 3, 2.0, 5).unwrap();
        save_features(&ds, &p).unwrap();
        let good = fs::read(&p).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&p, &bad).unwrap();
        assert!(load_features(&p)
            .unwrap_err()
            .to_string()
            .contains("bad magic"));

        fs::write(&p, &good[..good.len() - 5]).unwrap();
        assert!(matches!(load_features(&p), Err(Error::Truncated { .. })));

        let mut bad = good.clone();
        bad[HEADER_LEN + 8] = 9;
        fs::write(&p, &bad).unwrap();
        assert!(load_features(&p)
            .unwrap_err()
            .to_string()
            .contains("label 9"));
    }
}
