//! Dataset ingestion: numeric CSV tables, IDX image files, CIFAR-10 binary
//! records, and synthetic Gaussian blobs for oracles.

use crate::netmodel::{Activation, Shape, Tensor3};
use crate::rng::{self, tag};
use std::io::Read;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("parse error at row {row}, column {col}: {message}")]
    ParseError {
        row: usize,
        col: usize,
        message: String,
    },
    #[error("label error at row {row}: {message}")]
    LabelError { row: usize, message: String },
    #[error("format error: {0}")]
    FormatError(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-feature statistics captured during z-score normalization (population
/// standard deviation; constant features carry std 0 and normalize to 0).
#[derive(Debug, Clone)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// An immutable labeled dataset with a shared input shape.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Vec<Activation>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub feature_stats: Option<FeatureStats>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_shape(&self) -> Option<Shape> {
        self.inputs.first().map(|a| a.shape())
    }

    /// First `n` entries of a seeded shuffle; the whole set when `n` covers
    /// it. Deterministic given `seed`.
    pub fn subsample(&self, seed: u64, n: usize) -> Dataset {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut r = rng::keyed_rng(seed, &[tag::SHUFFLE]);
        rng::shuffle(&mut r, &mut order);
        order.truncate(n.min(self.len()));
        Dataset {
            inputs: order.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: order.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            feature_stats: self.feature_stats.clone(),
        }
    }

    /// Undoes z-score normalization of one input using the stored stats.
    pub fn denormalized_input(&self, idx: usize) -> Option<Vec<f64>> {
        let stats = self.feature_stats.as_ref()?;
        let x = self.inputs[idx].as_slice();
        Some(
            x.iter()
                .enumerate()
                .map(|(j, &v)| v * stats.std[j] + stats.mean[j])
                .collect(),
        )
    }

    /// Reinterprets flat inputs under an image shape of the same length.
    pub fn reshape_to(&self, shape: Shape) -> Result<Dataset, DataError> {
        let cur = self
            .input_shape()
            .ok_or_else(|| DataError::FormatError("empty dataset".into()))?;
        if cur.len() != shape.len() {
            return Err(DataError::FormatError(format!(
                "cannot reshape {} values into {shape}",
                cur.len()
            )));
        }
        let inputs = self
            .inputs
            .iter()
            .map(|a| match shape {
                Shape::Flat(_) => Ok(Activation::Flat(a.as_slice().to_vec())),
                Shape::Image {
                    channels,
                    height,
                    width,
                } => Ok(Activation::Image(
                    Tensor3::from_data(channels, height, width, a.as_slice().to_vec())
                        .map_err(|e| DataError::FormatError(e.to_string()))?,
                )),
            })
            .collect::<Result<Vec<_>, DataError>>()?;
        Ok(Dataset {
            inputs,
            labels: self.labels.clone(),
            n_classes: self.n_classes,
            feature_stats: self.feature_stats.clone(),
        })
    }
}

/// Loads a numeric CSV table, z-scores every feature column, and takes the
/// class label from `label_column`. Row order is the file order.
pub fn load_csv(
    path: &Path,
    label_column: usize,
    n_classes: usize,
    has_header: bool,
) -> Result<Dataset, DataError> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text, label_column, n_classes, has_header)
}

pub fn parse_csv(
    text: &str,
    label_column: usize,
    n_classes: usize,
    has_header: bool,
) -> Result<Dataset, DataError> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut width = None;
    for (line_no, line) in text.lines().enumerate() {
        if line_no == 0 && has_header {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let row_idx = rows.len();
        let mut features = Vec::new();
        let mut label = None;
        for (col, cell) in line.split(',').enumerate() {
            let value: f64 = cell.trim().parse().map_err(|_| DataError::ParseError {
                row: row_idx,
                col,
                message: format!("non-numeric cell '{}'", cell.trim()),
            })?;
            if col == label_column {
                let rounded = value.round();
                if (value - rounded).abs() > 1e-9 || rounded < 0.0 {
                    return Err(DataError::LabelError {
                        row: row_idx,
                        message: format!("label {value} is not a non-negative integer"),
                    });
                }
                label = Some(rounded as usize);
            } else {
                features.push(value);
            }
        }
        let label = label.ok_or(DataError::ParseError {
            row: row_idx,
            col: label_column,
            message: "label column out of range".into(),
        })?;
        if label >= n_classes {
            return Err(DataError::LabelError {
                row: row_idx,
                message: format!("label {label} outside [0, {n_classes})"),
            });
        }
        match width {
            None => width = Some(features.len()),
            Some(w) if w != features.len() => {
                return Err(DataError::ParseError {
                    row: row_idx,
                    col: features.len(),
                    message: format!("row has {} features, expected {w}", features.len()),
                })
            }
            _ => {}
        }
        rows.push(features);
        labels.push(label);
    }
    if rows.is_empty() {
        return Err(DataError::ParseError {
            row: 0,
            col: 0,
            message: "no data rows".into(),
        });
    }
    let (rows, stats) = zscore(rows);
    Ok(Dataset {
        inputs: rows.into_iter().map(Activation::Flat).collect(),
        labels,
        n_classes,
        feature_stats: Some(stats),
    })
}

fn zscore(mut rows: Vec<Vec<f64>>) -> (Vec<Vec<f64>>, FeatureStats) {
    let n = rows.len() as f64;
    let width = rows[0].len();
    let mut mean = vec![0.0; width];
    for row in &rows {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0; width];
    for row in &rows {
        for ((s, &v), &m) in std.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    for (j, s) in std.iter_mut().enumerate() {
        *s = s.sqrt();
        if *s <= 1e-12 * (1.0 + mean[j].abs()) {
            *s = 0.0; // constant feature: normalized value is pinned to 0
        }
    }
    for row in &mut rows {
        for (j, v) in row.iter_mut().enumerate() {
            *v = if std[j] == 0.0 { 0.0 } else { (*v - mean[j]) / std[j] };
        }
    }
    (rows, FeatureStats { mean, std })
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], off: usize, what: &str) -> Result<u32, DataError> {
    bytes
        .get(off..off + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| DataError::FormatError(format!("truncated {what}")))
}

/// Loads an IDX image/label file pair (big-endian headers, pixel bytes
/// scaled to `[0, 1]`, shape `(1, rows, cols)`).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    parse_idx(&images, &labels)
}

pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset, DataError> {
    if read_be_u32(images, 0, "image header")? != IDX_IMAGES_MAGIC {
        return Err(DataError::FormatError("bad image magic".into()));
    }
    if read_be_u32(labels, 0, "label header")? != IDX_LABELS_MAGIC {
        return Err(DataError::FormatError("bad label magic".into()));
    }
    let count = read_be_u32(images, 4, "image count")? as usize;
    let rows = read_be_u32(images, 8, "image rows")? as usize;
    let cols = read_be_u32(images, 12, "image cols")? as usize;
    let label_count = read_be_u32(labels, 4, "label count")? as usize;
    if count != label_count {
        return Err(DataError::FormatError(format!(
            "{count} images but {label_count} labels"
        )));
    }
    let pixels = &images[16..];
    if pixels.len() != count * rows * cols {
        return Err(DataError::FormatError(format!(
            "expected {} pixel bytes, found {}",
            count * rows * cols,
            pixels.len()
        )));
    }
    let label_bytes = &labels[8..];
    if label_bytes.len() != count {
        return Err(DataError::FormatError("label payload size mismatch".into()));
    }
    let mut inputs = Vec::with_capacity(count);
    for i in 0..count {
        let data: Vec<f64> = pixels[i * rows * cols..(i + 1) * rows * cols]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        inputs.push(Activation::Image(
            Tensor3::from_data(1, rows, cols, data)
                .map_err(|e| DataError::FormatError(e.to_string()))?,
        ));
    }
    let max_label = label_bytes.iter().copied().max().unwrap_or(0) as usize;
    Ok(Dataset {
        inputs,
        labels: label_bytes.iter().map(|&b| b as usize).collect(),
        n_classes: max_label + 1,
        feature_stats: None,
    })
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Loads CIFAR-10 binary records (1 label byte + 3072 pixel bytes each),
/// pixels scaled to `[0, 1]`, shape `(3, 32, 32)`.
pub fn load_cifar(path: &Path) -> Result<Dataset, DataError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(DataError::FormatError(format!(
            "file size {} is not a multiple of the {CIFAR_RECORD}-byte record",
            bytes.len()
        )));
    }
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(DataError::FormatError(format!("label byte {label} > 9")));
        }
        labels.push(label);
        let data: Vec<f64> = rec[1..].iter().map(|&b| b as f64 / 255.0).collect();
        inputs.push(Activation::Image(
            Tensor3::from_data(3, 32, 32, data)
                .map_err(|e| DataError::FormatError(e.to_string()))?,
        ));
    }
    Ok(Dataset {
        inputs,
        labels,
        n_classes: 10,
        feature_stats: None,
    })
}

/// Distance between neighbouring blob class means; large enough that a
/// nearest-mean classifier is essentially never wrong at unit variance.
pub const BLOB_SEPARATION: f64 = 20.0;

/// Synthetic Gaussian class blobs with unit within-class variance and
/// well-separated means. Labels cycle through the classes; deterministic
/// given `seed`.
pub fn synth_blobs(n: usize, dim: usize, n_classes: usize, seed: u64) -> Dataset {
    assert!(n >= n_classes && n_classes >= 1 && dim >= 1);
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut r = rng::keyed_rng(seed, &[tag::DATA]);
    for i in 0..n {
        let class = i % n_classes;
        let axis = class % dim;
        let level = (class / dim + 1) as f64;
        let mut x = vec![0.0; dim];
        for slot in x.iter_mut() {
            *slot = rng::standard_normal(&mut r);
        }
        x[axis] += BLOB_SEPARATION * level;
        inputs.push(Activation::Flat(x));
        labels.push(class);
    }
    Dataset {
        inputs,
        labels,
        n_classes,
        feature_stats: None,
    }
}

/// Mean of each blob class as placed by [`synth_blobs`].
pub fn blob_mean(class: usize, dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim];
    m[class % dim] = BLOB_SEPARATION * ((class / dim + 1) as f64);
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_row_csv_normalizes_as_expected() {
        // constant column maps to 0; the varying column z-scores to ±1
        let ds = parse_csv("0,2,0\n0,4,1\n", 2, 2, false).unwrap();
        assert_eq!(ds.inputs[0].as_slice(), &[0.0, -1.0]);
        assert_eq!(ds.inputs[1].as_slice(), &[0.0, 1.0]);
        assert_eq!(ds.labels, vec![0, 1]);
    }

    #[test]
    fn empty_csv_is_a_parse_error() {
        assert!(matches!(
            parse_csv("", 0, 2, false),
            Err(DataError::ParseError { .. })
        ));
    }

    #[test]
    fn non_numeric_cell_reports_row_and_col() {
        match parse_csv("1,2,0\n1,x,1\n", 2, 2, false) {
            Err(DataError::ParseError { row, col, .. }) => {
                assert_eq!((row, col), (1, 1));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        assert!(matches!(
            parse_csv("1,2,9\n", 2, 7, false),
            Err(DataError::LabelError { .. })
        ));
    }

    #[test]
    fn covertype_like_table_fits_the_published_model_shape() {
        // 54 features, 7 classes, matching the MLP 54-16-7 interface
        let mut text = String::new();
        let mut r = rng::keyed_rng(1, &[9]);
        for i in 0..20 {
            let row: Vec<String> = (0..54)
                .map(|_| format!("{:.4}", rng::uniform(&mut r, -3.0, 3.0)))
                .collect();
            text.push_str(&row.join(","));
            text.push_str(&format!(",{}\n", i % 7));
        }
        let ds = parse_csv(&text, 54, 7, false).unwrap();
        assert_eq!(ds.input_shape(), Some(Shape::Flat(54)));
        assert_eq!(ds.n_classes, 7);
        let spec = crate::netmodel::parse_model_string("MLP 54-16-7").unwrap();
        assert_eq!(spec.input_shape(), Shape::Flat(54));
        assert_eq!(spec.output_width(), Some(7));
    }

    #[test]
    fn normalization_round_trips_through_stored_stats() {
        let raw = "1.5,2,0\n-0.5,8,1\n3.25,5,0\n";
        let ds = parse_csv(raw, 2, 2, false).unwrap();
        let originals = [[1.5, 2.0], [-0.5, 8.0], [3.25, 5.0]];
        for (i, orig) in originals.iter().enumerate() {
            let rec = ds.denormalized_input(i).unwrap();
            for (a, b) in rec.iter().zip(orig) {
                assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn normalized_columns_have_unit_moments() {
        let mut text = String::new();
        let mut r = rng::keyed_rng(4, &[2]);
        for i in 0..50 {
            text.push_str(&format!(
                "{},{},{}\n",
                rng::uniform(&mut r, -5.0, 9.0),
                rng::uniform(&mut r, 100.0, 200.0),
                i % 3
            ));
        }
        let ds = parse_csv(&text, 2, 3, false).unwrap();
        for j in 0..2 {
            let vals: Vec<f64> = ds.inputs.iter().map(|a| a.as_slice()[j]).collect();
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / vals.len() as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var.sqrt() - 1.0).abs() < 1e-6);
        }
    }

    /// Hand-built IDX pair: two 2x2 images with known bytes.
    fn tiny_idx() -> (Vec<u8>, Vec<u8>) {
        let mut images = Vec::new();
        images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        images.extend_from_slice(&[0, 51, 102, 153, 204, 255, 0, 255]);
        let mut labels = Vec::new();
        labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        labels.extend_from_slice(&2u32.to_be_bytes());
        labels.extend_from_slice(&[3, 1]);
        (images, labels)
    }

    #[test]
    fn idx_fixture_recovers_exact_pixels() {
        let (images, labels) = tiny_idx();
        let ds = parse_idx(&images, &labels).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![3, 1]);
        let first = ds.inputs[0].as_slice();
        for (got, byte) in first.iter().zip([0u8, 51, 102, 153]) {
            assert_eq!(*got, byte as f64 / 255.0);
        }
        assert_eq!(
            ds.input_shape(),
            Some(Shape::Image {
                channels: 1,
                height: 2,
                width: 2
            })
        );
    }

    #[test]
    fn truncated_idx_header_is_rejected() {
        let err = parse_idx(&[0, 0, 8], &[]);
        assert!(matches!(err, Err(DataError::FormatError(_))));
    }

    #[test]
    fn mismatched_idx_counts_are_rejected() {
        let (images, mut labels) = tiny_idx();
        labels[4..8].copy_from_slice(&3u32.to_be_bytes());
        labels.push(7);
        let err = parse_idx(&images, &labels);
        assert!(matches!(err, Err(DataError::FormatError(_))));
    }

    #[test]
    fn bad_idx_magic_is_rejected() {
        let (mut images, labels) = tiny_idx();
        images[3] = 0x42;
        assert!(matches!(
            parse_idx(&images, &labels),
            Err(DataError::FormatError(_))
        ));
    }

    #[test]
    fn cifar_records_parse() {
        let mut bytes = Vec::new();
        for label in [0u8, 9] {
            bytes.push(label);
            bytes.extend(std::iter::repeat(128u8).take(3072));
        }
        let tmp = std::env::temp_dir().join("twosed_cifar_test.bin");
        std::fs::write(&tmp, &bytes).unwrap();
        let ds = load_cifar(&tmp).unwrap();
        std::fs::remove_file(&tmp).ok();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![0, 9]);
        assert_eq!(
            ds.input_shape(),
            Some(Shape::Image {
                channels: 3,
                height: 32,
                width: 32
            })
        );
    }

    #[test]
    fn single_class_blobs_all_carry_label_zero() {
        let ds = synth_blobs(10, 3, 1, 5);
        assert!(ds.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn blobs_are_deterministic() {
        let a = synth_blobs(50, 4, 3, 9);
        let b = synth_blobs(50, 4, 3, 9);
        assert_eq!(a.labels, b.labels);
        for (x, y) in a.inputs.iter().zip(&b.inputs) {
            assert_eq!(x.as_slice(), y.as_slice());
        }
    }

    #[test]
    fn nearest_mean_classifier_is_perfect_on_blobs() {
        let (n, dim, classes) = (1000, 2, 3);
        let ds = synth_blobs(n, dim, classes, 13);
        let means: Vec<Vec<f64>> = (0..classes).map(|c| blob_mean(c, dim)).collect();
        let correct = ds
            .inputs
            .iter()
            .zip(&ds.labels)
            .filter(|(x, &label)| {
                let best = means
                    .iter()
                    .enumerate()
                    .min_by(|(_, a), (_, b)| {
                        let da: f64 = x
                            .as_slice()
                            .iter()
                            .zip(*a)
                            .map(|(v, m)| (v - m) * (v - m))
                            .sum();
                        let db: f64 = x
                            .as_slice()
                            .iter()
                            .zip(*b)
                            .map(|(v, m)| (v - m) * (v - m))
                            .sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap()
                    .0;
                best == label
            })
            .count();
        assert_eq!(correct, n);
    }

    #[test]
    fn subsample_is_deterministic() {
        let ds = synth_blobs(100, 3, 4, 2);
        let a = ds.subsample(7, 25);
        let b = ds.subsample(7, 25);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.len(), 25);
        let c = ds.subsample(8, 25);
        assert_ne!(a.labels, c.labels);
    }
}
