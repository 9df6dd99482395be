//! Layer activations of a batch of examples, and their on-disk format.
//!
//! A feature file is a pair of files sharing a stem: a JSON header
//! (`<stem>.json`) and a little-endian binary payload (`<stem>.bin`).
//! The payload holds, in order, every layer block as a row-major
//! `n_examples × d_l` array of `f32`, the `n_examples × n_classes` logits
//! block as `f32`, and the predicted labels as `u32`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::linalg::{argmax, Matrix};

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    layer_names: Vec<String>,
    layers: Vec<Matrix>,
    logits: Matrix,
    predicted_labels: Vec<usize>,
}

impl FeatureBundle {
    /// Bundle whose predictions are the argmax of each logit row.
    pub fn new(layer_names: Vec<String>, layers: Vec<Matrix>, logits: Matrix) -> Result<Self> {
        let predicted_labels = logits.iter_rows().map(argmax).collect();
        Self::from_parts(layer_names, layers, logits, predicted_labels)
    }

    pub fn from_parts(
        layer_names: Vec<String>,
        layers: Vec<Matrix>,
        logits: Matrix,
        predicted_labels: Vec<usize>,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::param("a feature bundle needs at least one layer"));
        }
        if layer_names.len() != layers.len() {
            return Err(Error::param("one name per layer is required"));
        }
        let n = logits.rows();
        if logits.cols() == 0 {
            return Err(Error::param("logits need at least one column"));
        }
        for (name, m) in layer_names.iter().zip(&layers) {
            if m.rows() != n {
                return Err(Error::param(format!(
                    "layer {name} has {} rows, logits have {n}",
                    m.rows()
                )));
            }
            if m.cols() == 0 {
                return Err(Error::param(format!("layer {name} has zero width")));
            }
        }
        if predicted_labels.len() != n {
            return Err(Error::param("one predicted label per example is required"));
        }
        for (i, (&p, row)) in predicted_labels.iter().zip(logits.iter_rows()).enumerate() {
            // Ties are allowed: any maximal logit is a valid prediction.
            if p >= row.len() || row[p] < row[argmax(row)] {
                return Err(Error::param(format!(
                    "predicted label of row {i} is not an argmax of its logits"
                )));
            }
        }
        Ok(Self {
            layer_names,
            layers,
            logits,
            predicted_labels,
        })
    }

    pub fn n_examples(&self) -> usize {
        self.logits.rows()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_classes(&self) -> usize {
        self.logits.cols()
    }

    pub fn layer(&self, l: usize) -> &Matrix {
        &self.layers[l]
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn layer_names(&self) -> &[String] {
        &self.layer_names
    }

    pub fn logits(&self) -> &Matrix {
        &self.logits
    }

    pub fn predicted_labels(&self) -> &[usize] {
        &self.predicted_labels
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            layer_names: self.layer_names.clone(),
            layers: self.layers.iter().map(|m| m.select_rows(idx)).collect(),
            logits: self.logits.select_rows(idx),
            predicted_labels: idx.iter().map(|&i| self.predicted_labels[i]).collect(),
        }
    }

    /// Load per-layer CSV matrices (no header row) plus a logits CSV.
    pub fn from_csv<P: AsRef<Path>>(
        layer_names: Vec<String>,
        layer_paths: &[P],
        logits_path: impl AsRef<Path>,
    ) -> Result<Self> {
        let layers = layer_paths
            .iter()
            .map(|p| read_csv_matrix(p.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        let logits = read_csv_matrix(logits_path.as_ref())?;
        Self::new(layer_names, layers, logits).map_err(|e| match e {
            Error::Parameter(m) => FormatError::DimensionMismatch(m).into(),
            other => other,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerHeader {
    name: String,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    n_examples: usize,
    layers: Vec<LayerHeader>,
    n_classes: usize,
}

/// Paths of the header and payload files for a feature file stem or header path.
pub fn feature_paths(path: impl AsRef<Path>) -> (PathBuf, PathBuf) {
    let p = path.as_ref();
    (p.with_extension("json"), p.with_extension("bin"))
}

fn push_f32(buf: &mut Vec<u8>, what: &str, m: &Matrix) -> Result<()> {
    for &v in m.as_slice() {
        let x = v as f32;
        if !x.is_finite() {
            return Err(FormatError::NonFinite(what.to_string()).into());
        }
        buf.extend_from_slice(&x.to_le_bytes());
    }
    Ok(())
}

/// Serialize to the header/payload pair. Values are stored as `f32`;
/// non-finite values (including `f64` values overflowing `f32`) are rejected.
pub fn encode_features(bundle: &FeatureBundle) -> Result<(String, Vec<u8>)> {
    let n = bundle.n_examples();
    let header = Header {
        version: 1,
        n_examples: n,
        layers: bundle
            .layer_names
            .iter()
            .zip(&bundle.layers)
            .map(|(name, m)| LayerHeader {
                name: name.clone(),
                dim: m.cols(),
            })
            .collect(),
        n_classes: bundle.n_classes(),
    };
    let floats: usize = bundle.layers.iter().map(|m| m.cols()).sum::<usize>() + bundle.n_classes();
    let mut payload = Vec::with_capacity(4 * n * (floats + 1));
    for (name, m) in bundle.layer_names.iter().zip(&bundle.layers) {
        push_f32(&mut payload, &format!("layer {name}"), m)?;
    }
    push_f32(&mut payload, "logits", &bundle.logits)?;
    for &p in &bundle.predicted_labels {
        payload.extend_from_slice(&(p as u32).to_le_bytes());
    }
    let json = serde_json::to_string(&header).expect("header serializes");
    Ok((json, payload))
}

fn read_f32_block(payload: &[u8], offset: &mut usize, rows: usize, cols: usize, what: &str) -> Result<Matrix> {
    let mut data = Vec::with_capacity(rows * cols);
    for chunk in payload[*offset..*offset + 4 * rows * cols].chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        if !v.is_finite() {
            return Err(FormatError::NonFinite(what.to_string()).into());
        }
        data.push(f64::from(v));
    }
    *offset += 4 * rows * cols;
    Matrix::from_vec(rows, cols, data)
}

pub fn decode_features(header: &str, payload: &[u8]) -> Result<FeatureBundle> {
    let h: Header =
        serde_json::from_str(header).map_err(|e| FormatError::MalformedHeader(e.to_string()))?;
    if h.version != 1 {
        return Err(FormatError::MalformedHeader(format!("unsupported version {}", h.version)).into());
    }
    if h.layers.is_empty() || h.n_classes == 0 || h.layers.iter().any(|l| l.dim == 0) {
        return Err(FormatError::MalformedHeader(
            "header needs at least one layer, non-zero dims and classes".into(),
        )
        .into());
    }
    let n = h.n_examples;
    let widths: usize = h.layers.iter().map(|l| l.dim).sum::<usize>() + h.n_classes + 1;
    let expected = 4 * n * widths;
    if payload.len() < expected {
        return Err(FormatError::Truncated {
            expected,
            found: payload.len(),
        }
        .into());
    }
    if payload.len() > expected {
        return Err(FormatError::DimensionMismatch(format!(
            "payload has {} bytes, header implies {expected}",
            payload.len()
        ))
        .into());
    }
    let mut offset = 0;
    let mut layers = Vec::with_capacity(h.layers.len());
    for l in &h.layers {
        layers.push(read_f32_block(payload, &mut offset, n, l.dim, &l.name)?);
    }
    let logits = read_f32_block(payload, &mut offset, n, h.n_classes, "logits")?;
    let mut preds = Vec::with_capacity(n);
    for chunk in payload[offset..].chunks_exact(4) {
        let p = u32::from_le_bytes(chunk.try_into().expect("4-byte chunk")) as usize;
        if p >= h.n_classes {
            return Err(FormatError::DimensionMismatch(format!(
                "predicted label {p} exceeds {} classes",
                h.n_classes
            ))
            .into());
        }
        preds.push(p);
    }
    let names = h.layers.into_iter().map(|l| l.name).collect();
    FeatureBundle::from_parts(names, layers, logits, preds).map_err(|e| match e {
        Error::Parameter(m) => FormatError::DimensionMismatch(m).into(),
        other => other,
    })
}

pub fn write_features(bundle: &FeatureBundle, path: impl AsRef<Path>) -> Result<()> {
    let (hp, bp) = feature_paths(path);
    let (header, payload) = encode_features(bundle)?;
    fs::write(&hp, header).map_err(|e| Error::io(&hp, e))?;
    fs::write(&bp, payload).map_err(|e| Error::io(&bp, e))?;
    Ok(())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureBundle> {
    let (hp, bp) = feature_paths(path);
    let header = fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
    let payload = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    decode_features(&header, &payload)
}

/// Read a comma-separated numeric matrix with no header row.
pub fn read_csv_matrix(path: &Path) -> Result<Matrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => FormatError::Csv(format!("{other:?}")).into(),
        })?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| FormatError::Csv(format!("{}: {e}", path.display())))?;
        let row = rec
            .iter()
            .map(|f| {
                f.trim().parse::<f64>().map_err(|_| {
                    FormatError::Csv(format!("{}: row {i}: cannot parse `{f}`", path.display()))
                })
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Matrix::from_rows(&rows).map_err(|e| FormatError::Csv(format!("{}: {e}", path.display())).into())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FeatureBundle {
        let l1 = Matrix::from_rows(&[[1.0, 2.0], [0.5, -0.25], [3.0, 4.0]]).unwrap();
        let l2 = Matrix::from_rows(&[[1.0], [2.0], [-8.0]]).unwrap();
        let logits = Matrix::from_rows(&[[0.0, 1.0], [2.0, -1.0], [0.5, 0.25]]).unwrap();
        FeatureBundle::new(vec!["a".into(), "b".into()], vec![l1, l2], logits).unwrap()
    }

    #[test]
    fn encode_decode_round_trip() {
        let b = sample();
        let (h, p) = encode_features(&b).unwrap();
        assert_eq!(p.len(), 4 * 3 * (2 + 1 + 2 + 1));
        assert_eq!(decode_features(&h, &p).unwrap(), b);
    }

    #[test]
    fn missing_layer_payload_is_truncation() {
        let b = sample();
        let (_, p) = encode_features(&b).unwrap();
        let header = r#"{"version":1,"n_examples":3,"layers":[{"name":"a","dim":2},{"name":"b","dim":1},{"name":"c","dim":2}],"n_classes":2}"#;
        assert!(matches!(
            decode_features(header, &p),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
    }

    #[test]
    fn parse_errors_are_distinct() {
        let b = sample();
        let (h, mut p) = encode_features(&b).unwrap();
        assert!(matches!(
            decode_features("{not json", &p),
            Err(Error::Format(FormatError::MalformedHeader(_)))
        ));
        assert!(matches!(
            decode_features(&h.replace("\"version\":1", "\"version\":2"), &p),
            Err(Error::Format(FormatError::MalformedHeader(_)))
        ));
        p.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(
            decode_features(&h, &p),
            Err(Error::Format(FormatError::DimensionMismatch(_)))
        ));
    }

    #[test]
    fn non_finite_rejected_at_write() {
        let l1 = Matrix::from_rows(&[[f64::NAN]]).unwrap();
        let logits = Matrix::from_rows(&[[0.0, 1.0]]).unwrap();
        let b = FeatureBundle::new(vec!["a".into()], vec![l1], logits).unwrap();
        assert!(matches!(
            encode_features(&b),
            Err(Error::Format(FormatError::NonFinite(_)))
        ));
        let big = Matrix::from_rows(&[[1e300]]).unwrap();
        let b = FeatureBundle::new(vec!["a".into()], vec![big], Matrix::from_rows(&[[0.0, 1.0]]).unwrap())
            .unwrap();
        assert!(encode_features(&b).is_err());
    }

    #[test]
    fn row_count_mismatch_rejected() {
        let l1 = Matrix::zeros(2, 3);
        let logits = Matrix::zeros(3, 2);
        assert!(FeatureBundle::new(vec!["a".into()], vec![l1], logits).is_err());
    }
}
