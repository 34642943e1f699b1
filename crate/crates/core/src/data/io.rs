//! Feature files and the dataset manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AnnotatedSequence, Dataset};
use crate::error::{Error, Result};
use crate::segment::Segment;
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 8] = b"CETF0001";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FeatureHeader {
    channels: usize,
    length: usize,
    rate: f64,
    dtype: String,
}

/// Writes `[C, T]` features as little-endian f32.
pub fn write_features(path: &Path, features: &Tensor<f64>, rate_hz: f64) -> Result<()> {
    if features.rank() != 2 {
        return Err(Error::dim("write_features", format!("expected [C, T], got {:?}", features.shape())));
    }
    let header = FeatureHeader { channels: features.dim(0), length: features.dim(1), rate: rate_hz, dtype: "f32".into() };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len() + 4 * features.numel());
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for &v in features.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a feature file, returning `[C, T]` values and the stored rate.
pub fn read_features(path: &Path) -> Result<(Tensor<f64>, f64)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::data(path.display().to_string(), msg);
    if bytes.len() < 16 || &bytes[..8] != FEATURE_MAGIC {
        return Err(bad("not a feature file (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header".into()))?;
    let header: FeatureHeader = serde_json::from_slice(&bytes[16..body])?;
    if header.dtype != "f32" {
        return Err(bad(format!("unsupported dtype '{}'", header.dtype)));
    }
    let n = header.channels * header.length;
    if bytes.len() - body != 4 * n {
        return Err(bad(format!(
            "header declares {}x{} values but payload holds {} bytes",
            header.channels,
            header.length,
            bytes.len() - body
        )));
    }
    let data = bytes[body..].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    Ok((Tensor::new(&[header.channels, header.length], data)?, header.rate))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSegment {
    pub start_s: f64,
    pub end_s: f64,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    /// Relative paths resolve against the manifest's directory.
    pub features: String,
    pub rate_hz: f64,
    #[serde(default)]
    pub subject: String,
    #[serde(default)]
    pub segments: Vec<ManifestSegment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub sequences: Vec<ManifestEntry>,
    pub num_classes: usize,
    #[serde(default)]
    pub labels: Vec<String>,
}

pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::data(manifest_path.display().to_string(), format!("invalid manifest: {e}")))?;
    let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    if !manifest.labels.is_empty() && manifest.labels.len() != manifest.num_classes {
        return Err(Error::data(
            manifest_path.display().to_string(),
            format!("{} label names for {} classes", manifest.labels.len(), manifest.num_classes),
        ));
    }
    let mut sequences = Vec::with_capacity(manifest.sequences.len());
    for (i, entry) in manifest.sequences.iter().enumerate() {
        let id = entry.id.clone().unwrap_or_else(|| {
            Path::new(&entry.features).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or(format!("seq{i}"))
        });
        let path = resolve(&base, &entry.features);
        let (features, rate) = read_features(&path).map_err(|e| match e {
            Error::Io { source, .. } => Error::data(format!("sequence '{id}'"), format!("cannot read {}: {source}", path.display())),
            Error::Data { msg, .. } => Error::data(format!("sequence '{id}'"), msg),
            other => other,
        })?;
        if (rate - entry.rate_hz).abs() > 1e-9 * rate.abs().max(1.0) {
            return Err(Error::data(
                format!("sequence '{id}'"),
                format!("manifest rate {} Hz disagrees with feature header {rate} Hz", entry.rate_hz),
            ));
        }
        let seq = AnnotatedSequence {
            id,
            subject: entry.subject.clone(),
            features,
            rate_hz: entry.rate_hz,
            segments: entry.segments.iter().map(|s| Segment::new(s.start_s, s.end_s, s.label)).collect(),
        };
        sequences.push(seq);
    }
    let ds = Dataset { sequences, num_classes: manifest.num_classes, labels: manifest.labels };
    ds.validate()?;
    Ok(ds)
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Writes `<dir>/manifest.json` and one feature file per sequence under
/// `<dir>/features/`. Returns the manifest path.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<PathBuf> {
    let feat_dir = dir.join("features");
    std::fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let mut entries = Vec::with_capacity(ds.sequences.len());
    for s in &ds.sequences {
        let rel = format!("features/{}.cetf", s.id);
        write_features(&dir.join(&rel), &s.features, s.rate_hz)?;
        entries.push(ManifestEntry {
            id: Some(s.id.clone()),
            features: rel,
            rate_hz: s.rate_hz,
            subject: s.subject.clone(),
            segments: s.segments.iter().map(|g| ManifestSegment { start_s: g.start, end_s: g.end, label: g.label }).collect(),
        });
    }
    let manifest = Manifest { sequences: entries, num_classes: ds.num_classes, labels: ds.labels.clone() };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
